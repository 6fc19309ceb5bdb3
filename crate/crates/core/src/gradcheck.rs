//! Central finite-difference checks of every loss gradient on small random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::color::{Rgb, GAMMA};
use crate::error::Result;
use crate::grid::PixelGrid;
use crate::losses::{
    albedo_consistency_loss, albedo_smoothness_loss, appearance_loss, cross_render_loss, normal_loss,
    pseudo_supervision_loss, render_appearance_loss, total_loss, LossInputs, LossSettings, DEFAULT_TAU,
};
use crate::prior::LightingParams;
use crate::sh::{Normal, ShLighting};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const SIZE: usize = 8;
pub const SEEDS: u64 = 50;
/// Smallest neighbour difference per channel in random albedos.
pub const KINK_GAP: f64 = 1e-3;
/// Smallest angle between random normals and their guides, radians.
pub const MIN_GUIDE_ANGLE: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub seed: u64,
    /// `‖analytic − numeric‖ / max(‖numeric‖, ‖analytic‖)`.
    pub error: f64,
    pub passed: bool,
}

/// Relative disagreement between the analytic gradient of `f` at `x` and its
/// central differences.
pub fn compare(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut probe = x.to_vec();
    let mut diff = 0.0;
    let mut norm_n = 0.0;
    for k in 0..x.len() {
        probe[k] = x[k] + STEP;
        let up = f(&probe)?;
        probe[k] = x[k] - STEP;
        let down = f(&probe)?;
        probe[k] = x[k];
        let numeric = (up - down) / (2.0 * STEP);
        diff += (numeric - analytic[k]).powi(2);
        norm_n += numeric * numeric;
    }
    let norm_a: f64 = analytic.iter().map(|v| v * v).sum();
    let scale = norm_n.sqrt().max(norm_a.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

/// A random 8×8 problem with a few holes and every optional input present.
#[derive(Debug, Clone)]
pub struct Instance {
    pub observed: PixelGrid<Rgb>,
    pub albedo: PixelGrid<Rgb>,
    pub partner: PixelGrid<Rgb>,
    pub anchor: PixelGrid<Rgb>,
    pub normals: PixelGrid<Normal>,
    pub guide: PixelGrid<Normal>,
    pub lighting: ShLighting,
    pub params: LightingParams,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = SIZE * SIZE;
        let holes = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen::<f64>() > 0.1).collect::<Vec<bool>>();
        let colour = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let data = (0..n).map(|_| Rgb::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))).collect();
            let mask = holes(rng);
            PixelGrid::new(SIZE, SIZE, data, mask).expect("sizes match")
        };
        let observed = colour(&mut rng, 0.05, 0.95);
        // neighbour differences stay clear of the L1 kink
        let albedo = loop {
            let a = colour(&mut rng, 0.1, 0.9);
            if neighbours_differ(&a, KINK_GAP) {
                break a;
            }
        };
        let partner = colour(&mut rng, 0.1, 0.9);
        let anchor = colour(&mut rng, 0.1, 0.9);
        let direction = |rng: &mut ChaCha8Rng| {
            let data = (0..n)
                .map(|_| Normal::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(0.3..1.0)).normalize())
                .collect();
            PixelGrid::new(SIZE, SIZE, data, vec![true; n]).expect("sizes match")
        };
        let normals = direction(&mut rng);
        // estimates stay clear of their guides, where arccos is singular
        let mut guide = direction(&mut rng);
        for i in 0..n {
            while normals.value(i).dot(&guide.value(i)) > MIN_GUIDE_ANGLE.cos() {
                let fresh = direction(&mut rng);
                guide.set(i, fresh.value(i));
            }
        }
        let mut lighting = ShLighting::ambient(0.8);
        for c in 0..3 {
            for k in 1..9 {
                lighting.coeffs[c][k] = rng.gen_range(-0.08..0.08);
            }
        }
        let params = LightingParams::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        Self {
            observed,
            albedo,
            partner,
            anchor,
            normals,
            guide,
            lighting,
            params,
        }
    }
}

fn neighbours_differ(g: &PixelGrid<Rgb>, gap: f64) -> bool {
    let (w, h) = g.dims();
    let apart = |a: Rgb, b: Rgb| a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() > gap);
    (0..h).all(|y| {
        (0..w).all(|x| {
            let c = g.value(y * w + x);
            (x + 1 == w || apart(c, g.value(y * w + x + 1))) && (y + 1 == h || apart(c, g.value((y + 1) * w + x)))
        })
    })
}

fn flatten_rgb(g: &PixelGrid<Rgb>) -> Vec<f64> {
    g.data().iter().flat_map(|c| c.to_array()).collect()
}

fn unflatten_rgb(like: &PixelGrid<Rgb>, x: &[f64]) -> PixelGrid<Rgb> {
    let data = x.chunks(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect();
    PixelGrid::new(like.width(), like.height(), data, like.mask().to_vec()).expect("sizes match")
}

fn flatten_normals(g: &PixelGrid<Normal>) -> Vec<f64> {
    g.data().iter().flat_map(|n| [n.x, n.y, n.z]).collect()
}

fn unflatten_normals(like: &PixelGrid<Normal>, x: &[f64]) -> PixelGrid<Normal> {
    let data = x.chunks(3).map(|c| Normal::new(c[0], c[1], c[2])).collect();
    PixelGrid::new(like.width(), like.height(), data, like.mask().to_vec()).expect("sizes match")
}

fn lighting_from(x: &[f64]) -> ShLighting {
    let mut l = ShLighting::zeros();
    for c in 0..3 {
        for k in 0..9 {
            l.coeffs[c][k] = x[9 * c + k];
        }
    }
    l
}

fn rgb_vec(g: &[Rgb]) -> Vec<f64> {
    g.iter().flat_map(|c| c.to_array()).collect()
}

fn normal_vec(g: &[Normal]) -> Vec<f64> {
    g.iter().flat_map(|n| [n.x, n.y, n.z]).collect()
}

/// Every gradient check on the instance drawn from `seed`.
pub fn check_seed(seed: u64) -> Result<Vec<Check>> {
    let p = Instance::random(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, error: f64| {
        out.push(Check {
            name: name.to_string(),
            seed,
            error,
            passed: error <= TOLERANCE,
        })
    };

    let x = flatten_rgb(&p.observed);
    let pred = unflatten_rgb(&p.observed, &x).map(|c| c.map(|v| (v * 0.9 + 0.04).min(1.0)));
    let a = appearance_loss(&pred, &p.observed)?;
    let xp = flatten_rgb(&pred);
    push(
        "appearance/pred",
        compare(&xp, &rgb_vec(&a.grad), |x| Ok(appearance_loss(&unflatten_rgb(&pred, x), &p.observed)?.value))?,
    );

    let xn = flatten_normals(&p.normals);
    let nl = normal_loss(&p.normals, &p.guide)?;
    push(
        "normal/normals",
        compare(&xn, &normal_vec(&nl.grad), |x| Ok(normal_loss(&unflatten_normals(&p.normals, x), &p.guide)?.value))?,
    );

    let xa = flatten_rgb(&p.albedo);
    let xq = flatten_rgb(&p.partner);
    let ac = albedo_consistency_loss(&p.albedo, &p.partner)?;
    push(
        "albedo_consistency/own",
        compare(&xa, &rgb_vec(&ac.grad_own), |x| Ok(albedo_consistency_loss(&unflatten_rgb(&p.albedo, x), &p.partner)?.value))?,
    );
    push(
        "albedo_consistency/partner",
        compare(&xq, &rgb_vec(&ac.grad_partner), |x| Ok(albedo_consistency_loss(&p.albedo, &unflatten_rgb(&p.partner, x))?.value))?,
    );

    let xl = p.lighting.to_vec27().to_vec();
    let render = |albedo: &PixelGrid<Rgb>, normals: &PixelGrid<Normal>, l: &ShLighting| {
        render_appearance_loss(albedo, normals, l, &p.observed, GAMMA)
    };
    let r = render(&p.albedo, &p.normals, &p.lighting)?;
    push(
        "render_appearance/albedo",
        compare(&xa, &rgb_vec(&r.grad_albedo), |x| Ok(render(&unflatten_rgb(&p.albedo, x), &p.normals, &p.lighting)?.value))?,
    );
    push(
        "render_appearance/normals",
        compare(&xn, &normal_vec(&r.grad_normals), |x| Ok(render(&p.albedo, &unflatten_normals(&p.normals, x), &p.lighting)?.value))?,
    );
    push(
        "render_appearance/lighting",
        compare(&xl, &r.grad_lighting.to_vec27(), |x| Ok(render(&p.albedo, &p.normals, &lighting_from(x))?.value))?,
    );

    let cross = |partner: &PixelGrid<Rgb>, normals: &PixelGrid<Normal>, l: &ShLighting| {
        cross_render_loss(partner, normals, l, &p.observed, GAMMA)
    };
    let c = cross(&p.partner, &p.normals, &p.lighting)?;
    push(
        "cross_render/partner",
        compare(&xq, &rgb_vec(&c.grad_albedo), |x| Ok(cross(&unflatten_rgb(&p.partner, x), &p.normals, &p.lighting)?.value))?,
    );
    push(
        "cross_render/normals",
        compare(&xn, &normal_vec(&c.grad_normals), |x| Ok(cross(&p.partner, &unflatten_normals(&p.normals, x), &p.lighting)?.value))?,
    );
    push(
        "cross_render/lighting",
        compare(&xl, &c.grad_lighting.to_vec27(), |x| Ok(cross(&p.partner, &p.normals, &lighting_from(x))?.value))?,
    );

    let s = albedo_smoothness_loss(&p.albedo, &p.observed, DEFAULT_TAU)?;
    push(
        "smoothness/albedo",
        compare(&xa, &rgb_vec(&s.grad), |x| Ok(albedo_smoothness_loss(&unflatten_rgb(&p.albedo, x), &p.observed, DEFAULT_TAU)?.value))?,
    );

    let ps = pseudo_supervision_loss(&p.albedo, &p.anchor)?;
    push(
        "pseudo_supervision/albedo",
        compare(&xa, &rgb_vec(&ps.grad), |x| Ok(pseudo_supervision_loss(&unflatten_rgb(&p.albedo, x), &p.anchor)?.value))?,
    );

    let settings = LossSettings::default();
    let total = |albedo: &PixelGrid<Rgb>, normals: &PixelGrid<Normal>, l: &ShLighting, alpha: &LightingParams, partner: &PixelGrid<Rgb>| {
        total_loss(
            &LossInputs {
                observed: &p.observed,
                normals,
                albedo,
                lighting: l,
                lighting_params: Some(alpha),
                guide_normals: Some(&p.guide),
                anchor: Some(&p.anchor),
                partner_albedo: Some(partner),
            },
            &settings,
        )
    };
    let t = total(&p.albedo, &p.normals, &p.lighting, &p.params, &p.partner)?;
    push(
        "total/albedo",
        compare(&xa, &rgb_vec(&t.grads.albedo), |x| Ok(total(&unflatten_rgb(&p.albedo, x), &p.normals, &p.lighting, &p.params, &p.partner)?.value))?,
    );
    push(
        "total/normals",
        compare(&xn, &normal_vec(&t.grads.normals), |x| {
            Ok(total(&p.albedo, &unflatten_normals(&p.normals, x), &p.lighting, &p.params, &p.partner)?.value)
        })?,
    );
    push(
        "total/lighting",
        compare(&xl, &t.grads.lighting.to_vec27(), |x| Ok(total(&p.albedo, &p.normals, &lighting_from(x), &p.params, &p.partner)?.value))?,
    );
    push(
        "total/lighting_params",
        compare(&p.params.alpha, &t.grads.lighting_params, |x| {
            Ok(total(&p.albedo, &p.normals, &p.lighting, &LightingParams::new(x.to_vec()), &p.partner)?.value)
        })?,
    );
    let gp = t.grads.partner_albedo.clone().unwrap_or_default();
    push(
        "total/partner",
        compare(&xq, &rgb_vec(&gp), |x| Ok(total(&p.albedo, &p.normals, &p.lighting, &p.params, &unflatten_rgb(&p.partner, x))?.value))?,
    );
    Ok(out)
}

/// Checks over `count` consecutive seeds starting at `first`.
pub fn run(first: u64, count: u64) -> Result<Vec<Check>> {
    let mut all = Vec::new();
    for seed in first..first + count {
        all.extend(check_seed(seed)?);
    }
    Ok(all)
}

/// Worst error per check name, in first-seen order.
pub fn summarize(checks: &[Check]) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|o| o.name == c.name) {
            Some(o) => {
                if c.error > o.error {
                    o.error = c.error;
                    o.seed = c.seed;
                }
                o.passed &= c.passed;
            }
            None => out.push(c.clone()),
        }
    }
    out
}
