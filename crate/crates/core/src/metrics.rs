//! Error measures for albedo and normal estimates.
//!
//! Albedo metrics compare scaled predictions against the truth on the joint
//! validity mask; windowed metrics skip windows with fewer than two valid
//! pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::grid::{intersect_masks, PixelGrid};
use crate::sh::Normal;

pub const LMSE_WINDOW: usize = 20;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn joint_indices<A: Copy + Default, B: Copy + Default>(a: &PixelGrid<A>, b: &PixelGrid<B>, what: &str) -> Result<Vec<usize>> {
    a.ensure_same_dims(b)?;
    let mask = intersect_masks(&[a.mask(), b.mask()]);
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask(format!("{what}: inputs share no valid pixel")));
    }
    Ok(idx)
}

/// Per-channel least-squares factors taking `pred` to `truth`.
pub fn channel_optimal_scale(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<[f64; 3]> {
    let idx = joint_indices(pred, truth, "channel scale")?;
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for &i in &idx {
        let (p, t) = (pred.value(i).to_array(), truth.value(i).to_array());
        for c in 0..3 {
            num[c] += p[c] * t[c];
            den[c] += p[c] * p[c];
        }
    }
    let mut s = [0.0; 3];
    for c in 0..3 {
        if den[c] == 0.0 {
            return Err(Error::Domain(format!("channel {c} of the prediction is zero; scale undefined")));
        }
        s[c] = num[c] / den[c];
    }
    Ok(s)
}

/// `pred` multiplied channel-wise by its optimal scale.
pub fn scale_to(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<PixelGrid<Rgb>> {
    let s = channel_optimal_scale(pred, truth)?;
    Ok(pred.map(|c| Rgb::new(c.r * s[0], c.g * s[1], c.b * s[2])))
}

/// Mean squared error per channel value over the joint mask.
pub fn mse(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<f64> {
    let idx = joint_indices(pred, truth, "mse")?;
    let sum: f64 = idx
        .iter()
        .map(|&i| (pred.value(i) - truth.value(i)).to_vector().norm_squared())
        .sum();
    Ok(sum / (3 * idx.len()) as f64)
}

fn window_starts(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return vec![0];
    }
    (0..=len - k).step_by(k / 2).collect()
}

/// Local mean squared error: the average over half-overlapping `k`×`k`
/// windows of the MSE after per-window, per-channel optimal scaling.
pub fn lmse_with_window(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Domain(format!("LMSE window must be at least 2, got {k}")));
    }
    joint_indices(pred, truth, "lmse")?;
    let (w, h) = pred.dims();
    let windows: Vec<(usize, usize)> = window_starts(h, k)
        .into_iter()
        .flat_map(|y| window_starts(w, k).into_iter().map(move |x| (x, y)))
        .collect();
    let scores: Vec<Option<f64>> = windows
        .par_iter()
        .map(|&(x0, y0)| {
            let mut idx = Vec::new();
            for y in y0..(y0 + k).min(h) {
                for x in x0..(x0 + k).min(w) {
                    let i = y * w + x;
                    if pred.is_valid(i) && truth.is_valid(i) {
                        idx.push(i);
                    }
                }
            }
            if idx.len() < 2 {
                return None;
            }
            let mut err = 0.0;
            for c in 0..3 {
                let (mut pt, mut pp) = (0.0, 0.0);
                for &i in &idx {
                    let (p, t) = (pred.value(i).to_array()[c], truth.value(i).to_array()[c]);
                    pt += p * t;
                    pp += p * p;
                }
                let s = if pp > 0.0 { pt / pp } else { 0.0 };
                for &i in &idx {
                    let (p, t) = (pred.value(i).to_array()[c], truth.value(i).to_array()[c]);
                    err += (s * p - t).powi(2);
                }
            }
            Some(err / (3 * idx.len()) as f64)
        })
        .collect();
    let used: Vec<f64> = scores.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyMask("lmse: no window has two valid pixels".into()));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

pub fn lmse(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<f64> {
    lmse_with_window(pred, truth, LMSE_WINDOW)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Mean structural similarity over valid pixels, averaged over channels.
/// Window statistics use Gaussian weights renormalised over the valid
/// neighbours of each centre.
pub fn ssim(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<f64> {
    let idx = joint_indices(pred, truth, "ssim")?;
    let (w, h) = pred.dims();
    let g = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let r = (SSIM_WINDOW / 2) as isize;
    let scores: Vec<Option<f64>> = idx
        .par_iter()
        .map(|&centre| {
            let (cx, cy) = ((centre % w) as isize, (centre / w) as isize);
            let mut taps = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if pred.is_valid(i) && truth.is_valid(i) {
                        taps.push((i, g[(dx + r) as usize] * g[(dy + r) as usize]));
                    }
                }
            }
            if taps.len() < 2 {
                return None;
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            let mut s = 0.0;
            for c in 0..3 {
                let (mut mx, mut my) = (0.0, 0.0);
                for &(i, wt) in &taps {
                    mx += wt * pred.value(i).to_array()[c];
                    my += wt * truth.value(i).to_array()[c];
                }
                mx /= total;
                my /= total;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for &(i, wt) in &taps {
                    let dx = pred.value(i).to_array()[c] - mx;
                    let dy = truth.value(i).to_array()[c] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
                vx /= total;
                vy /= total;
                cxy /= total;
                s += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            Some(s / 3.0)
        })
        .collect();
    let used: Vec<f64> = scores.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyMask("ssim: no pixel has two valid neighbours".into()));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// `(1 − SSIM) / 2`, clamped to `[0, 1]` against rounding.
pub fn dssim(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<f64> {
    Ok(((1.0 - ssim(pred, truth)?) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub pixels: usize,
}

/// Per-pixel angle between normal maps, in degrees.
pub fn angular_errors(pred: &PixelGrid<Normal>, truth: &PixelGrid<Normal>) -> Result<Vec<f64>> {
    let idx = joint_indices(pred, truth, "angular error")?;
    Ok(idx
        .par_iter()
        .map(|&i| {
            let (a, b) = (pred.value(i), truth.value(i));
            let d = a.dot(&b) / (a.norm() * b.norm());
            d.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect())
}

pub fn angular_error_stats(pred: &PixelGrid<Normal>, truth: &PixelGrid<Normal>) -> Result<AngularStats> {
    let mut e = angular_errors(pred, truth)?;
    let n = e.len();
    let mean_deg = e.iter().sum::<f64>() / n as f64;
    e.sort_by(f64::total_cmp);
    let median_deg = if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) };
    Ok(AngularStats {
        mean_deg,
        median_deg,
        pixels: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlbedoScores {
    pub scale: [f64; 3],
    pub mse: f64,
    pub lmse: f64,
    pub dssim: f64,
    pub pixels: usize,
}

/// MSE, LMSE and DSSIM of `pred` after per-channel optimal scaling.
pub fn albedo_scores(pred: &PixelGrid<Rgb>, truth: &PixelGrid<Rgb>) -> Result<AlbedoScores> {
    let scale = channel_optimal_scale(pred, truth)?;
    let scaled = pred.map(|c| Rgb::new(c.r * scale[0], c.g * scale[1], c.b * scale[2]));
    Ok(AlbedoScores {
        scale,
        mse: mse(&scaled, truth)?,
        lmse: lmse(&scaled, truth)?,
        dssim: dssim(&scaled, truth)?,
        pixels: joint_indices(pred, truth, "albedo scores")?.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> PixelGrid<Rgb> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PixelGrid::from_fn(w, h, |_, _| Some(Rgb::new(rng.gen(), rng.gen(), rng.gen())))
    }

    fn random_normals(w: usize, h: usize, seed: u64) -> PixelGrid<Normal> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PixelGrid::from_fn(w, h, |_, _| {
            Some(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)).normalize())
        })
    }

    #[test]
    fn identical_inputs_score_zero() {
        let a = random_image(30, 25, 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(lmse(&a, &a).unwrap() < 1e-28);
        assert!(dssim(&a, &a).unwrap() < 1e-12);
        let n = random_normals(10, 10, 2);
        let s = angular_error_stats(&n, &n).unwrap();
        assert!(s.mean_deg < 1e-5 && s.median_deg < 1e-5);
    }

    #[test]
    fn channel_scale_examples() {
        let t = random_image(8, 8, 3);
        let s = channel_optimal_scale(&t, &t).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let half = t.map(|c| c * 0.5);
        let s = channel_optimal_scale(&half, &t).unwrap();
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-14));
    }

    #[test]
    fn channel_scale_matches_regression() {
        let p = random_image(9, 7, 4);
        let t = random_image(9, 7, 5);
        let s = channel_optimal_scale(&p, &t).unwrap();
        for c in 0..3 {
            // the derivative of Σ(s·p − t)² vanishes at the optimum
            let d: f64 = p.valid_indices().map(|i| {
                let (pv, tv) = (p.value(i).to_array()[c], t.value(i).to_array()[c]);
                (s[c] * pv - tv) * pv
            }).sum();
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_prediction_has_zero_lmse_but_positive_mse() {
        let t = random_image(45, 33, 6);
        let p = t.map(|c| c * 2.0);
        assert!(mse(&p, &t).unwrap() > 0.01);
        assert!(lmse(&p, &t).unwrap() < 1e-28);
    }

    #[test]
    fn lmse_ignores_per_window_scaling() {
        let t = random_image(40, 40, 7);
        let p = t.map(|c| Rgb::new(c.r * 2.0, c.g * 0.5, c.b * 3.0));
        assert!(lmse(&p, &t).unwrap() < 1e-28);
        // a single window sees one factor per channel
        let t = random_image(20, 20, 8);
        let p = PixelGrid::from_fn(20, 20, |x, y| Some(t.value(y * 20 + x) * 0.25));
        assert!(lmse(&p, &t).unwrap() < 1e-28);
    }

    #[test]
    fn dssim_of_constants_matches_closed_form() {
        let (a, b) = (0.4, 0.55);
        let x = PixelGrid::filled(16, 16, Rgb::new(a, a, a));
        let y = PixelGrid::filled(16, 16, Rgb::new(b, b, b));
        let expected = (1.0 - (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)) / 2.0;
        assert!((dssim(&x, &y).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.024319066).abs() < 1e-9);
    }

    #[test]
    fn rotated_normals_have_constant_error() {
        let axis = Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
        let rot = Rotation3::from_axis_angle(&axis, 10f64.to_radians());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = PixelGrid::from_fn(12, 12, |_, _| {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Some(Vector3::new(t.cos(), t.sin(), 0.0))
        });
        let r = n.map(|v| rot * v);
        let s = angular_error_stats(&r, &n).unwrap();
        assert!((s.mean_deg - 10.0).abs() < 1e-9 && (s.median_deg - 10.0).abs() < 1e-9);
    }

    #[test]
    fn angular_matches_pixel_loop() {
        let a = random_normals(11, 9, 9);
        let b = random_normals(11, 9, 10);
        let s = angular_error_stats(&a, &b).unwrap();
        let mut e = Vec::new();
        for i in 0..a.len() {
            let d = a.value(i).dot(&b.value(i)).clamp(-1.0, 1.0);
            e.push(d.acos() * 180.0 / std::f64::consts::PI);
        }
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        e.sort_by(f64::total_cmp);
        assert!((s.mean_deg - mean).abs() < 1e-10);
        assert!((s.median_deg - e[e.len() / 2]).abs() < 1e-10);
    }

    #[test]
    fn empty_joint_mask_is_an_error() {
        let a = random_image(4, 4, 1);
        let b = PixelGrid::<Rgb>::invalid(4, 4);
        assert!(matches!(mse(&a, &b), Err(Error::EmptyMask(_))));
        assert!(matches!(dssim(&a, &b), Err(Error::EmptyMask(_))));
    }

    proptest! {
        #[test]
        fn dssim_stays_in_unit_range(seed in any::<u64>()) {
            let a = random_image(12, 12, seed);
            let b = random_image(12, 12, seed.wrapping_add(1));
            let d = dssim(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn mse_and_angular_ignore_pixel_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_image(6, 5, seed), random_image(6, 5, seed ^ 1));
            let (na, nb) = (random_normals(6, 5, seed), random_normals(6, 5, seed ^ 1));
            let mut perm: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() { perm.swap(i, rng.gen_range(0..=i)); }
            let shuffle = |g: &PixelGrid<Rgb>| PixelGrid::from_vec(6, 5, perm.iter().map(|&i| g.value(i)).collect()).unwrap();
            let shuffle_n = |g: &PixelGrid<Normal>| PixelGrid::from_vec(6, 5, perm.iter().map(|&i| g.value(i)).collect()).unwrap();
            prop_assert!((mse(&a, &b).unwrap() - mse(&shuffle(&a), &shuffle(&b)).unwrap()).abs() < 1e-14);
            let s0 = angular_error_stats(&na, &nb).unwrap();
            let s1 = angular_error_stats(&shuffle_n(&na), &shuffle_n(&nb)).unwrap();
            prop_assert!((s0.mean_deg - s1.mean_deg).abs() < 1e-10);
            prop_assert_eq!(s0.median_deg, s1.median_deg);
        }
    }
}
