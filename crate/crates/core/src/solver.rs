//! Two-phase energy minimisation over a gradient field, log-albedo and
//! lighting-prior coordinates, for single views and Siamese pairs.
//!
//! Phase 1 holds the normals at the guide (depth-derived) normals and fits
//! albedo and lighting; its albedo becomes the pseudo-supervision anchor.
//! Phase 2 frees every unknown under the full weighted objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{gamma_decode, Rgb, GAMMA};
use crate::error::{Error, Result};
use crate::geometry::{
    gradient_from_normal, normal_from_gradient, normal_gradient_jacobian, normals_from_depth, GradientField,
    PosedDepth, Warp,
};
use crate::grid::{intersect_masks, PixelGrid};
use crate::losses::{total_loss, LossInputs, LossSettings, LossWeights, TermValues, DEFAULT_TAU};
use crate::prior::{IlluminationPrior, LightingParams};
use crate::sh::{basis, basis_jacobian, solve_lighting, LightingSolve, Normal, ShLighting};
use nalgebra::SVector;

/// Initial log-albedo is clipped to this range.
pub const LOG_ALBEDO_INIT_RANGE: (f64, f64) = (-4.0, 1.0);

/// Shading below this value is held constant by the shading-ratio albedo.
pub const SHADING_FLOOR: f64 = 1e-3;
const LINEAR_FLOOR: f64 = 1e-6;
const BACKTRACK_SHRINK: f64 = 0.5;
const BACKTRACK_GROWTH: f64 = 1.25;

/// How the free albedo unknown is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlbedoUnknown {
    /// `albedo = exp(r)`.
    Log,
    /// `albedo = image / shading · exp(r)`: the same energy, but lighting and
    /// normal updates carry the albedo along so the photograph stays explained.
    ShadingRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub weights: LossWeights,
    pub lighting_weight: f64,
    /// Chromaticity bandwidth of the smoothness weights.
    pub tau: f64,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// The step size follows a cosine from `step_size` down to
    /// `step_size * final_step_ratio` within each phase. 1 disables decay.
    pub final_step_ratio: f64,
    /// Phase 2 starts from `step_size * phase2_step_ratio`.
    pub phase2_step_ratio: f64,
    /// Reject steps that raise the objective and shrink the next one; the
    /// optimiser state then also carries over between phases.
    pub backtrack: bool,
    /// Amplitude of uniform noise added to the initial log-albedo.
    pub init_jitter: f64,
    pub albedo_unknown: AlbedoUnknown,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lighting_weight: 0.01,
            tau: DEFAULT_TAU,
            phase1_iters: 500,
            phase2_iters: 1500,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            final_step_ratio: 1e-3,
            phase2_step_ratio: 0.1,
            backtrack: true,
            init_jitter: 0.0,
            albedo_unknown: AlbedoUnknown::ShadingRatio,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("step_size", self.step_size),
            ("eps_adam", self.eps_adam),
            ("tau", self.tau),
            ("final_step_ratio", self.final_step_ratio),
            ("phase2_step_ratio", self.phase2_step_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.lighting_weight >= 0.0) || !(self.init_jitter >= 0.0) {
            return Err(Error::Domain("lighting_weight and init_jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            lighting_weight: self.lighting_weight,
            tau: self.tau,
            gamma: GAMMA,
        }
    }

    fn step_at(&self, phase: u8, k: usize, iters: usize) -> f64 {
        let start = if phase == 2 { self.step_size * self.phase2_step_ratio } else { self.step_size };
        if iters <= 1 {
            return start;
        }
        let t = k as f64 / (iters - 1) as f64;
        let floor = start * self.final_step_ratio;
        floor + 0.5 * (start - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// The unknowns of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEstimate {
    pub gradients: GradientField,
    pub log_albedo: PixelGrid<Rgb>,
    pub lighting: LightingParams,
}

impl SceneEstimate {
    pub fn albedo(&self) -> PixelGrid<Rgb> {
        self.log_albedo.map(|c| c.map(f64::exp))
    }

    pub fn normals(&self) -> PixelGrid<Normal> {
        crate::geometry::gradient_to_normals(&self.gradients)
    }

    pub fn is_finite(&self) -> bool {
        let g = &self.gradients;
        g.wu().data().iter().chain(g.wv().data()).all(|v| v.is_finite())
            && self.log_albedo.data().iter().all(|c| c.is_finite())
            && self.lighting.alpha.iter().all(|a| a.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: u8,
    pub terms: TermValues,
    pub total: f64,
}

/// Per-iteration values of every term for one view, recorded before each step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub const CSV_HEADER: &'static str =
        "iteration,phase,appearance,normal,albedo,cross_render,smoothness,pseudo,lighting,total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = &r.terms;
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.iteration,
                r.phase,
                t.appearance,
                t.normal,
                t.albedo,
                t.cross_render,
                t.smoothness,
                t.pseudo,
                t.lighting,
                r.total
            ));
        }
        out
    }

    pub fn phase(&self, phase: u8) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// One photograph to decompose. `image` is display-encoded in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub image: &'a PixelGrid<Rgb>,
    /// `true` marks sky pixels, which every term ignores.
    pub sky: Option<&'a PixelGrid<bool>>,
    pub guide: Option<&'a PosedDepth>,
}

#[derive(Debug, Clone)]
pub struct ViewSolution {
    pub estimate: SceneEstimate,
    pub lighting: ShLighting,
    /// Phase-1 albedo used as the phase-2 anchor.
    pub anchor: PixelGrid<Rgb>,
    /// Final unweighted term values.
    pub final_terms: TermValues,
    pub trace: LossTrace,
}

#[derive(Debug, Clone)]
pub struct PairSolution {
    pub views: [ViewSolution; 2],
    /// False when the views were solved independently, because they did not
    /// overlap or both coupling weights are zero.
    pub coupled: bool,
    pub warnings: Vec<String>,
}

/// Fixed per-view data and the location of its unknowns in the packed vector.
struct ViewState {
    dims: (usize, usize),
    mask: Vec<bool>,
    phase1_mask: Vec<bool>,
    observed: PixelGrid<Rgb>,
    observed_phase1: PixelGrid<Rgb>,
    /// Linear image, floored for the shading-ratio parameterisation.
    linear: Vec<Rgb>,
    guide_normals: Option<PixelGrid<Normal>>,
    phase1_normals: PixelGrid<Normal>,
    offset: usize,
}

/// Everything derived from the unknowns of one view at one iterate.
struct Snapshot {
    normals: PixelGrid<Normal>,
    alpha: LightingParams,
    lighting: ShLighting,
    shading: Vec<Rgb>,
    albedo: PixelGrid<Rgb>,
}

impl ViewState {
    fn pixels(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    fn wu(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.pixels()
    }

    fn wv(&self) -> std::ops::Range<usize> {
        let n = self.pixels();
        self.offset + n..self.offset + 2 * n
    }

    fn residual(&self) -> std::ops::Range<usize> {
        let n = self.pixels();
        self.offset + 2 * n..self.offset + 5 * n
    }

    fn alpha(&self, dim: usize) -> std::ops::Range<usize> {
        let n = self.pixels();
        self.offset + 5 * n..self.offset + 5 * n + dim
    }

    fn len(&self, dim: usize) -> usize {
        5 * self.pixels() + dim
    }

    fn new(input: &ViewInput<'_>, offset: usize) -> Result<Self> {
        let image = input.image;
        let (w, h) = image.dims();
        let mut mask = image.mask().to_vec();
        if let Some(sky) = input.sky {
            image.ensure_same_dims(sky)?;
            for (m, i) in mask.iter_mut().zip(0..) {
                *m &= !sky.value(i);
            }
        }
        for (i, m) in mask.iter_mut().enumerate() {
            let c = image.value(i);
            if *m && !(c.is_finite() && c.min_channel() >= 0.0) {
                return Err(Error::Domain(format!("image value {c:?} at pixel {i} is not a valid intensity")));
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask("solve: image has no usable pixels".into()));
        }
        let guide_normals = match input.guide {
            Some(g) => {
                image.ensure_same_dims(g.depth())?;
                Some(normals_from_depth(g).restrict(&mask)?)
            }
            None => None,
        };
        let (phase1_mask, phase1_normals) = match &guide_normals {
            Some(g) => (intersect_masks(&[&mask, g.mask()]), g.clone()),
            None => (mask.clone(), PixelGrid::new(w, h, vec![Normal::z(); w * h], mask.clone())?),
        };
        if !phase1_mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask("solve: guide depth covers no usable pixel".into()));
        }
        let observed = image.restrict(&mask)?;
        let linear = (0..w * h)
            .map(|i| {
                let c = gamma_decode(observed.value(i))?;
                Ok(c.map(|v| v.max(LINEAR_FLOOR)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims: (w, h),
            observed_phase1: image.restrict(&phase1_mask)?,
            observed,
            linear,
            mask,
            phase1_mask,
            guide_normals,
            phase1_normals,
            offset,
        })
    }

    fn mask_for(&self, phase: u8) -> &[bool] {
        if phase == 1 {
            &self.phase1_mask
        } else {
            &self.mask
        }
    }

    fn snapshot(&self, params: &[f64], phase: u8, prior: &IlluminationPrior, unknown: AlbedoUnknown) -> Result<Snapshot> {
        let (w, h) = self.dims;
        let normals = if phase == 1 {
            self.phase1_normals.clone()
        } else {
            let (wu, wv) = (&params[self.wu()], &params[self.wv()]);
            let data = (0..self.pixels()).map(|i| normal_from_gradient(wu[i], wv[i])).collect();
            PixelGrid::new(w, h, data, self.mask.clone())?
        };
        let alpha = LightingParams::new(params[self.alpha(prior.dim())].to_vec());
        let lighting = prior.decode(&alpha)?;
        let shading: Vec<Rgb> = (0..self.pixels())
            .map(|i| lighting.shade(&basis(&normals.value(i))))
            .collect();
        let r = &params[self.residual()];
        let albedo = (0..self.pixels())
            .map(|i| {
                let d = Rgb::new(r[3 * i], r[3 * i + 1], r[3 * i + 2]);
                match unknown {
                    AlbedoUnknown::Log => d.map(f64::exp),
                    AlbedoUnknown::ShadingRatio => {
                        let s = shading[i].map(|v| v.max(SHADING_FLOOR));
                        self.linear[i].zip(s, |l, s| l / s) * d.map(f64::exp)
                    }
                }
            })
            .collect();
        Ok(Snapshot {
            albedo: PixelGrid::new(w, h, albedo, self.mask_for(phase).to_vec())?,
            normals,
            alpha,
            lighting,
            shading,
        })
    }

    /// Sets the albedo of pixels left out of phase 1 so that they reproduce
    /// the image under the phase-2 shading.
    fn fill_unguided(&self, params: &mut [f64], prior: &IlluminationPrior, unknown: AlbedoUnknown) -> Result<()> {
        let n = self.pixels();
        let shading = self.snapshot(params, 2, prior, unknown)?.shading;
        for i in (0..n).filter(|&i| self.mask[i] && !self.phase1_mask[i]) {
            let lin = self.linear[i].to_array();
            let shade = shading[i].to_array();
            for c in 0..3 {
                params[2 * n + 3 * i + c] = match unknown {
                    AlbedoUnknown::Log => (lin[c] / shade[c].max(SHADING_FLOOR)).ln(),
                    AlbedoUnknown::ShadingRatio => 0.0,
                };
            }
        }
        Ok(())
    }

    /// Initial unknowns: guide gradients, albedo `decode(image) / 0.5` clipped
    /// in log space, prior coordinates at the mean.
    fn initial_params(&self, prior: &IlluminationPrior, cfg: &SolveConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let dim = prior.dim();
        let mut p = vec![0.0; self.len(dim)];
        let n = self.pixels();
        let (lo, hi) = LOG_ALBEDO_INIT_RANGE;
        for i in (0..n).filter(|&i| self.mask[i]) {
            if let Some(g) = &self.guide_normals {
                if let Some((u, v)) = g.at(i).and_then(gradient_from_normal) {
                    p[i] = u;
                    p[n + i] = v;
                }
            }
        }
        // the ratio parameterisation is relative to the phase-1 shading
        let mut padded = vec![0.0; self.offset];
        padded.extend_from_slice(&p);
        let base = self.snapshot(&padded, 1, prior, AlbedoUnknown::Log)?;
        for i in (0..n).filter(|&i| self.mask[i]) {
            let lin = gamma_decode(self.observed.value(i))?.to_array();
            let shade = base.shading[i].to_array();
            for c in 0..3 {
                let mut la = (lin[c] / 0.5).ln().clamp(lo, hi);
                if cfg.init_jitter > 0.0 {
                    la += cfg.init_jitter * rng.gen_range(-1.0..1.0);
                }
                p[2 * n + 3 * i + c] = match cfg.albedo_unknown {
                    AlbedoUnknown::Log => la,
                    AlbedoUnknown::ShadingRatio => la - self.linear[i].to_array()[c].ln() + shade[c].max(SHADING_FLOOR).ln(),
                };
            }
        }
        Ok(p)
    }

    fn estimate(&self, params: &[f64], snap: &Snapshot) -> Result<SceneEstimate> {
        let (w, h) = self.dims;
        let grid = |r: std::ops::Range<usize>| PixelGrid::new(w, h, params[r].to_vec(), self.mask.clone());
        let log_albedo = PixelGrid::new(
            w,
            h,
            snap.albedo.data().iter().map(|a| a.map(f64::ln)).collect(),
            self.mask.clone(),
        )?;
        Ok(SceneEstimate {
            gradients: GradientField::new(grid(self.wu())?, grid(self.wv())?)?,
            log_albedo,
            lighting: snap.alpha.clone(),
        })
    }
}

/// Adam with a step count per coordinate: a coordinate starts counting at
/// its first non-zero gradient, so unknowns frozen so far start fresh.
#[derive(Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &SolveConfig) {
        for (k, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            if self.t[k] == 0 && g == 0.0 {
                continue;
            }
            self.t[k] += 1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let bc1 = 1.0 - cfg.beta1.powi(self.t[k]);
            let bc2 = 1.0 - cfg.beta2.powi(self.t[k]);
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps_adam);
        }
    }
}

/// Warps between the two views of a pair: `into[v]` pulls the other view's
/// pixels into view `v`.
struct PairWarps {
    into: [Warp; 2],
}

struct Problem<'a> {
    views: Vec<ViewState>,
    prior: &'a IlluminationPrior,
    cfg: SolveConfig,
    warps: Option<PairWarps>,
}

struct Evaluation {
    values: Vec<(f64, TermValues)>,
    grad: Vec<f64>,
}

impl Evaluation {
    fn total(&self) -> f64 {
        self.values.iter().map(|v| v.0).sum()
    }

    fn is_finite(&self) -> bool {
        self.values.iter().all(|(v, _)| v.is_finite()) && self.grad.iter().all(|g| g.is_finite())
    }
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn coupled(&self) -> bool {
        self.warps.is_some() && (self.cfg.weights.albedo > 0.0 || self.cfg.weights.cross_render > 0.0)
    }

    fn snapshots(&self, params: &[f64], phase: u8) -> Result<Vec<Snapshot>> {
        self.views
            .iter()
            .map(|v| v.snapshot(params, phase, self.prior, self.cfg.albedo_unknown))
            .collect()
    }

    fn evaluate(&self, params: &[f64], phase: u8, anchors: &[Option<PixelGrid<Rgb>>]) -> Result<Evaluation> {
        let dim = self.dim();
        let mut settings = self.cfg.loss_settings();
        if phase == 1 {
            settings.weights.normal = 0.0;
            settings.weights.pseudo = 0.0;
        }
        let snaps = self.snapshots(params, phase)?;
        let mut grad = vec![0.0; params.len()];
        let mut albedo_grads: Vec<Vec<Rgb>> = self.views.iter().map(|v| vec![Rgb::default(); v.pixels()]).collect();
        let mut normal_grads = Vec::with_capacity(self.views.len());
        let mut lighting_grads = Vec::with_capacity(self.views.len());
        let mut values = Vec::with_capacity(self.views.len());
        for (k, view) in self.views.iter().enumerate() {
            let snap = &snaps[k];
            let partner = match (&self.warps, self.coupled()) {
                (Some(w), true) => Some(w.into[k].apply(&snaps[1 - k].albedo)?),
                _ => None,
            };
            let mut view_settings = settings;
            if view.guide_normals.is_none() {
                view_settings.weights.normal = 0.0;
            }
            let inputs = LossInputs {
                observed: if phase == 1 { &view.observed_phase1 } else { &view.observed },
                normals: &snap.normals,
                albedo: &snap.albedo,
                lighting: &snap.lighting,
                lighting_params: Some(&snap.alpha),
                guide_normals: view.guide_normals.as_ref(),
                anchor: anchors[k].as_ref(),
                partner_albedo: partner.as_ref(),
            };
            let t = total_loss(&inputs, &view_settings)?;
            values.push((t.value, t.terms));
            for (acc, g) in albedo_grads[k].iter_mut().zip(&t.grads.albedo) {
                *acc += *g;
            }
            if let (Some(gp), Some(p), Some(w)) = (&t.grads.partner_albedo, &partner, &self.warps) {
                let (pw, ph) = p.dims();
                let g = PixelGrid::new(pw, ph, gp.clone(), p.mask().to_vec())?;
                let back = w.into[k].scatter(&g, &snaps[1 - k].albedo)?;
                for (acc, g) in albedo_grads[1 - k].iter_mut().zip(back) {
                    *acc += g;
                }
            }
            normal_grads.push(t.grads.normals);
            lighting_grads.push((t.grads.lighting, t.grads.lighting_params));
        }
        let basis_mat = self.prior.scaled_components();
        for (k, view) in self.views.iter().enumerate() {
            let snap = &snaps[k];
            let (mut g_light, g_alpha) = lighting_grads[k].clone();
            let g_normals = &mut normal_grads[k];
            let r = view.residual();
            for i in (0..view.pixels()).filter(|&i| snap.albedo.is_valid(i)) {
                let a = snap.albedo.value(i);
                let ga = albedo_grads[k][i];
                grad[r.start + 3 * i..r.start + 3 * i + 3].copy_from_slice(&(ga * a).to_array());
                if self.cfg.albedo_unknown == AlbedoUnknown::ShadingRatio {
                    // albedo ∝ 1 / shading
                    let s = snap.shading[i].to_array();
                    let (ga, a) = (ga.to_array(), a.to_array());
                    let mut g_shade = [0.0; 3];
                    for c in 0..3 {
                        if s[c] > SHADING_FLOOR {
                            g_shade[c] = -ga[c] * a[c] / s[c];
                        }
                    }
                    let n = snap.normals.value(i);
                    let b = basis(&n).0;
                    let mut g_b = SVector::<f64, 9>::zeros();
                    for c in 0..3 {
                        for q in 0..9 {
                            g_light.coeffs[c][q] += g_shade[c] * b[q];
                            g_b[q] += g_shade[c] * snap.lighting.coeffs[c][q];
                        }
                    }
                    if phase == 2 {
                        g_normals[i] += basis_jacobian(&n).transpose() * g_b;
                    }
                }
            }
            if phase == 2 {
                let (wu, wv) = (&params[view.wu()], &params[view.wv()]);
                let n = view.pixels();
                for i in (0..n).filter(|&i| view.mask[i]) {
                    let (du, dv) = normal_gradient_jacobian(wu[i], wv[i]);
                    let g = g_normals[i];
                    grad[view.offset + i] = g.dot(&du);
                    grad[view.offset + n + i] = g.dot(&dv);
                }
            }
            let gl = g_light.to_vec27();
            for (j, a) in grad[view.alpha(dim)].iter_mut().enumerate() {
                *a = g_alpha[j] + (0..27).map(|r| basis_mat[(r, j)] * gl[r]).sum::<f64>();
            }
        }
        Ok(Evaluation { values, grad })
    }

    fn anchors(&self, params: &[f64]) -> Result<Vec<Option<PixelGrid<Rgb>>>> {
        Ok(self.snapshots(params, 1)?.into_iter().map(|s| Some(s.albedo)).collect())
    }

    fn run(&self, mut params: Vec<f64>) -> Result<(Vec<f64>, Vec<ViewOutcome>, Vec<PixelGrid<Rgb>>)> {
        let mut traces = vec![LossTrace::default(); self.views.len()];
        let mut anchors = vec![None; self.views.len()];
        let mut iteration = 0;
        let mut adam = Adam::new(params.len());
        for (phase, iters) in [(1u8, self.cfg.phase1_iters), (2u8, self.cfg.phase2_iters)] {
            if phase == 2 {
                anchors = self.anchors(&params)?;
                for v in &self.views {
                    v.fill_unguided(&mut params, self.prior, self.cfg.albedo_unknown)?;
                }
            }
            if !self.cfg.backtrack {
                adam = Adam::new(params.len());
            }
            let mut current = self.evaluate(&params, phase, &anchors)?;
            let mut multiplier = 1.0;
            for k in 0..iters {
                for (trace, (total, terms)) in traces.iter_mut().zip(&current.values) {
                    trace.rows.push(TraceRow {
                        iteration,
                        phase,
                        terms: *terms,
                        total: *total,
                    });
                }
                if !current.is_finite() {
                    let trace = traces.swap_remove(0);
                    return Err(Error::NonFinite {
                        iteration,
                        trace: Box::new(trace),
                    });
                }
                let lr = self.cfg.step_at(phase, k, iters);
                if self.cfg.backtrack {
                    let mut candidate = params.clone();
                    let mut next_adam = adam.clone();
                    next_adam.step(&mut candidate, &current.grad, lr * multiplier, &self.cfg);
                    let next = self.evaluate(&candidate, phase, &anchors)?;
                    if next.is_finite() && next.total() <= current.total() {
                        params = candidate;
                        adam = next_adam;
                        current = next;
                        multiplier = (multiplier * BACKTRACK_GROWTH).min(1.0);
                    } else {
                        multiplier *= BACKTRACK_SHRINK;
                    }
                } else {
                    adam.step(&mut params, &current.grad, lr, &self.cfg);
                    current = self.evaluate(&params, phase, &anchors)?;
                }
                iteration += 1;
            }
        }
        if self.cfg.phase2_iters == 0 {
            anchors = self.anchors(&params)?;
        }
        let outcomes = self.final_terms(&params, &anchors)?.into_iter().zip(traces).map(|(terms, trace)| ViewOutcome { trace, terms }).collect();
        let anchors = anchors.into_iter().map(|a| a.expect("anchors set after phase 1")).collect();
        Ok((params, outcomes, anchors))
    }

    fn final_terms(&self, params: &[f64], anchors: &[Option<PixelGrid<Rgb>>]) -> Result<Vec<TermValues>> {
        Ok(self.evaluate(params, 2, anchors)?.values.into_iter().map(|(_, t)| t).collect())
    }
}

struct ViewOutcome {
    trace: LossTrace,
    terms: TermValues,
}

fn finish(problem: &Problem<'_>, params: &[f64], outcomes: Vec<ViewOutcome>, anchors: Vec<PixelGrid<Rgb>>) -> Result<Vec<ViewSolution>> {
    let snaps = problem.snapshots(params, 2)?;
    problem
        .views
        .iter()
        .zip(snaps)
        .zip(outcomes.into_iter().zip(anchors))
        .map(|((v, snap), (o, anchor))| {
            Ok(ViewSolution {
                estimate: v.estimate(params, &snap)?,
                lighting: snap.lighting,
                anchor,
                final_terms: o.terms,
                trace: o.trace,
            })
        })
        .collect()
}

fn solve_views(inputs: &[ViewInput<'_>], prior: &IlluminationPrior, cfg: &SolveConfig, warps: Option<PairWarps>) -> Result<Vec<ViewSolution>> {
    cfg.validate()?;
    let dim = prior.dim();
    let mut views = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for input in inputs {
        let v = ViewState::new(input, offset)?;
        offset += v.len(dim);
        views.push(v);
    }
    let mut params = Vec::with_capacity(offset);
    for v in &views {
        // each view draws from its own stream so pair and single runs agree
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut local = v.initial_params(prior, cfg, &mut rng)?;
        params.append(&mut local);
    }
    let problem = Problem {
        views,
        prior,
        cfg: *cfg,
        warps,
    };
    let (params, outcomes, anchors) = if cfg.phase1_iters == 0 && cfg.phase2_iters == 0 {
        let anchors = problem.anchors(&params)?;
        let outcomes = problem
            .final_terms(&params, &anchors)?
            .into_iter()
            .map(|terms| ViewOutcome {
                trace: LossTrace::default(),
                terms,
            })
            .collect();
        (params, outcomes, anchors.into_iter().flatten().collect())
    } else {
        problem.run(params)?
    };
    finish(&problem, &params, outcomes, anchors)
}

/// Decomposes one photograph. Without a guide, phase 1 uses frontal normals
/// and the normal term is disabled.
pub fn solve_single(view: &ViewInput<'_>, prior: &IlluminationPrior, cfg: &SolveConfig) -> Result<ViewSolution> {
    Ok(solve_views(&[*view], prior, cfg, None)?.remove(0))
}

/// Jointly decomposes two overlapping posed views, adding albedo consistency
/// and cross-rendering in both directions. Both views need a guide depth.
pub fn solve_pair(a: &ViewInput<'_>, b: &ViewInput<'_>, prior: &IlluminationPrior, cfg: &SolveConfig) -> Result<PairSolution> {
    let (Some(da), Some(db)) = (a.guide, b.guide) else {
        return Err(Error::InsufficientData("pair solve needs a posed depth map for both views".into()));
    };
    let masks = [ViewState::new(a, 0)?.mask, ViewState::new(b, 0)?.mask];
    let into = [
        Warp::new(da, db.camera(), b.image.dims()),
        Warp::new(db, da.camera(), a.image.dims()),
    ];
    let mut warnings = Vec::new();
    let overlap = (0..2).all(|k| {
        let src = &masks[1 - k];
        let (w, h) = if k == 0 { b.image.dims() } else { a.image.dims() };
        let probe = PixelGrid::new(w, h, vec![0.0f64; w * h], src.clone()).expect("mask length matches");
        match into[k].apply(&probe) {
            Ok(p) => p.mask().iter().zip(&masks[k]).any(|(x, y)| *x && *y),
            Err(_) => false,
        }
    });
    if !overlap || (cfg.weights.albedo == 0.0 && cfg.weights.cross_render == 0.0) {
        if !overlap {
            warnings.push("views do not overlap; solved independently".to_string());
        }
        let sa = solve_single(a, prior, cfg)?;
        let sb = solve_single(b, prior, cfg)?;
        return Ok(PairSolution {
            views: [sa, sb],
            coupled: false,
            warnings,
        });
    }
    let mut out = solve_views(&[*a, *b], prior, cfg, Some(PairWarps { into }))?;
    let second = out.pop().expect("two views");
    let first = out.pop().expect("two views");
    Ok(PairSolution {
        views: [first, second],
        coupled: true,
        warnings,
    })
}

/// Lighting that best explains `image` (display-encoded) given an estimate's
/// albedo and normals, solved in the prior subspace.
pub fn infer_lighting(image: &PixelGrid<Rgb>, estimate: &SceneEstimate, prior: &IlluminationPrior) -> Result<LightingSolve> {
    let mut lin = PixelGrid::invalid(image.width(), image.height());
    for i in image.valid_indices() {
        lin.set(i, gamma_decode(image.value(i))?);
    }
    solve_lighting(&lin, &estimate.albedo(), &estimate.normals(), Some(prior))
}
