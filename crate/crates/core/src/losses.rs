//! Supervision terms and their analytic gradients.
//!
//! Every per-pixel term is mean-reduced over the pixels valid in all of its
//! inputs, so weights do not depend on resolution. Gradients are returned as
//! flat per-pixel vectors (zero at pixels that did not contribute).

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{
    chromaticity, encoded_rgb_to_lab_jacobian, gamma_encode_smooth, linear_rgb_to_lab_jacobian, Rgb, GAMMA,
};
use crate::error::{Error, Result};
use crate::grid::{intersect_masks, PixelGrid};
use crate::prior::{prior_energy, LightingParams};
use crate::sh::{basis, basis_jacobian, Normal, ShLighting};

/// Derivative clamp for `acos` at aligned or opposite normals.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;

/// Default chromaticity bandwidth of the smoothness weights.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub appearance: f64,
    pub normal: f64,
    pub albedo: f64,
    pub cross_render: f64,
    pub smoothness: f64,
    pub pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            appearance: 1.0,
            normal: 0.5,
            albedo: 0.5,
            cross_render: 0.5,
            smoothness: 0.1,
            pseudo: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            appearance: 0.0,
            normal: 0.0,
            albedo: 0.0,
            cross_render: 0.0,
            smoothness: 0.0,
            pseudo: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.appearance,
            self.normal,
            self.albedo,
            self.cross_render,
            self.smoothness,
            self.pseudo,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn require_pixels(count: usize, what: &str) -> Result<f64> {
    if count == 0 {
        return Err(Error::EmptyMask(what.to_string()));
    }
    Ok(1.0 / count as f64)
}

#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub value: f64,
    /// d value / d predicted pixel.
    pub grad: Vec<Rgb>,
    pub pixels: usize,
}

/// Mean per-pixel Euclidean LAB distance between two encoded images.
pub fn appearance_loss(pred: &PixelGrid<Rgb>, observed: &PixelGrid<Rgb>) -> Result<ImageLoss> {
    pred.ensure_same_dims(observed)?;
    let mask = intersect_masks(&[pred.mask(), observed.mask()]);
    let count = mask.iter().filter(|&&m| m).count();
    let inv = require_pixels(count, "appearance loss")?;
    let per_pixel: Vec<(f64, Rgb)> = (0..pred.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return (0.0, Rgb::default());
            }
            let (lp, j) = encoded_rgb_to_lab_jacobian(pred.value(i));
            let (lo, _) = encoded_rgb_to_lab_jacobian(observed.value(i));
            let d = lp.to_vector() - lo.to_vector();
            let dist = d.norm();
            if dist == 0.0 {
                return (0.0, Rgb::default());
            }
            (dist, Rgb::from_vector(j.transpose() * (d / dist)) * inv)
        })
        .collect();
    let value = per_pixel.iter().map(|p| p.0).sum::<f64>() * inv;
    Ok(ImageLoss {
        value,
        grad: per_pixel.into_iter().map(|p| p.1).collect(),
        pixels: count,
    })
}

#[derive(Debug, Clone)]
pub struct NormalLoss {
    pub value: f64,
    pub grad: Vec<Normal>,
    pub pixels: usize,
}

/// Mean angle (radians) between estimated and guide normals.
pub fn normal_loss(estimate: &PixelGrid<Normal>, guide: &PixelGrid<Normal>) -> Result<NormalLoss> {
    estimate.ensure_same_dims(guide)?;
    let mask = intersect_masks(&[estimate.mask(), guide.mask()]);
    let count = mask.iter().filter(|&&m| m).count();
    let inv = require_pixels(count, "normal loss: estimate and guide do not overlap")?;
    let mut value = 0.0;
    let mut grad = vec![Normal::zeros(); estimate.len()];
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let g = guide.value(i);
        let d = estimate.value(i).dot(&g);
        value += d.clamp(-1.0, 1.0).acos();
        let dc = d.clamp(-ACOS_CLAMP, ACOS_CLAMP);
        grad[i] = g * (-inv / (1.0 - dc * dc).sqrt());
    }
    Ok(NormalLoss {
        value: value * inv,
        grad,
        pixels: count,
    })
}

/// `s = ⟨x, y⟩ / ⟨y, y⟩` and the residual `‖x − s·y‖²`.
pub fn optimal_scale(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let yy: f64 = y.iter().map(|v| v * v).sum();
    if yy == 0.0 {
        return Err(Error::Domain("optimal scale undefined for an all-zero reference".into()));
    }
    let s = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / yy;
    let r = x.iter().zip(y).map(|(a, b)| (a - s * b).powi(2)).sum();
    Ok((s, r))
}

#[derive(Debug, Clone)]
pub struct AlbedoConsistency {
    pub value: f64,
    pub scale: f64,
    pub grad_own: Vec<Rgb>,
    pub grad_partner: Vec<Rgb>,
    pub pixels: usize,
}

/// `min_s ‖LAB(A_i) − s·LAB(A_j)‖²` averaged over shared pixels, with `A_j`
/// already cross-projected into view i. Albedos are linear reflectances.
pub fn albedo_consistency_loss(own: &PixelGrid<Rgb>, partner: &PixelGrid<Rgb>) -> Result<AlbedoConsistency> {
    own.ensure_same_dims(partner)?;
    let mask = intersect_masks(&[own.mask(), partner.mask()]);
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let inv = require_pixels(idx.len(), "albedo consistency: no shared pixels")?;
    let xs: Vec<(Vector3<f64>, Matrix3<f64>)> = idx
        .iter()
        .map(|&i| {
            let (l, j) = linear_rgb_to_lab_jacobian(own.value(i));
            (l.to_vector(), j)
        })
        .collect();
    let ys: Vec<(Vector3<f64>, Matrix3<f64>)> = idx
        .iter()
        .map(|&i| {
            let (l, j) = linear_rgb_to_lab_jacobian(partner.value(i));
            (l.to_vector(), j)
        })
        .collect();
    let flat = |v: &[(Vector3<f64>, Matrix3<f64>)]| v.iter().flat_map(|(l, _)| l.iter().copied()).collect::<Vec<_>>();
    let (scale, residual) = optimal_scale(&flat(&xs), &flat(&ys))?;
    let mut grad_own = vec![Rgb::default(); own.len()];
    let mut grad_partner = vec![Rgb::default(); own.len()];
    for (k, &i) in idx.iter().enumerate() {
        let r = xs[k].0 - ys[k].0 * scale;
        // s is optimal, so its own variation does not contribute
        grad_own[i] = Rgb::from_vector(xs[k].1.transpose() * r * (2.0 * inv));
        grad_partner[i] = Rgb::from_vector(ys[k].1.transpose() * r * (-2.0 * scale * inv));
    }
    Ok(AlbedoConsistency {
        value: residual * inv,
        scale,
        grad_own,
        grad_partner,
        pixels: idx.len(),
    })
}

#[derive(Debug, Clone)]
pub struct RenderLoss {
    pub value: f64,
    pub grad_albedo: Vec<Rgb>,
    pub grad_normals: Vec<Normal>,
    pub grad_lighting: ShLighting,
    pub pixels: usize,
}

/// Renders `albedo ⊙ L·b(n)` without clamping, gamma-encodes it and compares
/// with `observed` in LAB. Shared by the appearance and cross-rendering terms.
pub fn render_appearance_loss(
    albedo: &PixelGrid<Rgb>,
    normals: &PixelGrid<Normal>,
    lighting: &ShLighting,
    observed: &PixelGrid<Rgb>,
    gamma: f64,
) -> Result<RenderLoss> {
    albedo.ensure_same_dims(normals)?;
    albedo.ensure_same_dims(observed)?;
    let mask = intersect_masks(&[albedo.mask(), normals.mask(), observed.mask()]);
    let count = mask.iter().filter(|&&m| m).count();
    let inv = require_pixels(count, "rendering loss")?;
    struct Px {
        value: f64,
        g_albedo: Rgb,
        g_normal: Normal,
        g_shading: Rgb,
    }
    let per_pixel: Vec<Option<Px>> = (0..albedo.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return None;
            }
            let n = normals.value(i);
            let a = albedo.value(i);
            let b = basis(&n);
            let shading = lighting.shade(&b);
            let lin = a * shading;
            let enc = lin.map(|v| gamma_encode_smooth(v, gamma).0);
            let denc = lin.map(|v| gamma_encode_smooth(v, gamma).1);
            let (lp, j) = encoded_rgb_to_lab_jacobian(enc);
            let (lo, _) = encoded_rgb_to_lab_jacobian(observed.value(i));
            let d = lp.to_vector() - lo.to_vector();
            let dist = d.norm();
            if dist == 0.0 {
                return Some(Px {
                    value: 0.0,
                    g_albedo: Rgb::default(),
                    g_normal: Normal::zeros(),
                    g_shading: Rgb::default(),
                });
            }
            let g_lin = Rgb::from_vector(j.transpose() * (d * (inv / dist))) * denc;
            let g_shading = g_lin * a;
            let sh = g_shading.to_array();
            let mut g_b = [0.0; 9];
            for (c, row) in lighting.coeffs.iter().enumerate() {
                for k in 0..9 {
                    g_b[k] += sh[c] * row[k];
                }
            }
            let g_normal = basis_jacobian(&n).transpose() * nalgebra::SVector::<f64, 9>::from(g_b);
            Some(Px {
                value: dist,
                g_albedo: g_lin * shading,
                g_normal,
                g_shading,
            })
        })
        .collect();
    let mut value = 0.0;
    let mut grad_lighting = ShLighting::zeros();
    let mut grad_albedo = vec![Rgb::default(); albedo.len()];
    let mut grad_normals = vec![Normal::zeros(); albedo.len()];
    for (i, px) in per_pixel.into_iter().enumerate() {
        let Some(px) = px else { continue };
        value += px.value;
        grad_albedo[i] = px.g_albedo;
        grad_normals[i] = px.g_normal;
        let b = basis(&normals.value(i)).0;
        let gs = px.g_shading.to_array();
        for c in 0..3 {
            for k in 0..9 {
                grad_lighting.coeffs[c][k] += gs[c] * b[k];
            }
        }
    }
    Ok(RenderLoss {
        value: value * inv,
        grad_albedo,
        grad_normals,
        grad_lighting,
        pixels: count,
    })
}

/// Renders view i with the albedo cross-projected from view j and measures the
/// appearance error against view i's photograph.
pub fn cross_render_loss(
    partner_albedo: &PixelGrid<Rgb>,
    normals: &PixelGrid<Normal>,
    lighting: &ShLighting,
    observed: &PixelGrid<Rgb>,
    gamma: f64,
) -> Result<RenderLoss> {
    if partner_albedo.valid_count() == 0 {
        return Err(Error::EmptyMask("cross-rendering: warped albedo has no valid pixels".into()));
    }
    render_appearance_loss(partner_albedo, normals, lighting, observed, gamma)
}

#[derive(Debug, Clone)]
pub struct AlbedoLoss {
    pub value: f64,
    pub grad: Vec<Rgb>,
    pub pixels: usize,
}

/// Chromaticity-weighted L1 differences between 4-connected albedo neighbours:
/// `Σ ω(p,q)·‖A(p) − A(q)‖₁ / #pairs` with
/// `ω = exp(−‖chrom(p) − chrom(q)‖² / τ²)` on the input image.
pub fn albedo_smoothness_loss(albedo: &PixelGrid<Rgb>, image: &PixelGrid<Rgb>, tau: f64) -> Result<AlbedoLoss> {
    albedo.ensure_same_dims(image)?;
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("smoothness bandwidth must be positive, got {tau}")));
    }
    let mask = intersect_masks(&[albedo.mask(), image.mask()]);
    let (w, h) = albedo.dims();
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            if x + 1 < w && mask[p + 1] {
                pairs.push((p, p + 1));
            }
            if y + 1 < h && mask[p + w] {
                pairs.push((p, p + w));
            }
        }
    }
    let mut grad = vec![Rgb::default(); albedo.len()];
    if pairs.is_empty() {
        return Ok(AlbedoLoss {
            value: 0.0,
            grad,
            pixels: 0,
        });
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    for &(p, q) in &pairs {
        let (cp, cq) = (chromaticity(image.value(p)), chromaticity(image.value(q)));
        let d2 = (cp.0 - cq.0).powi(2) + (cp.1 - cq.1).powi(2);
        let omega = (-d2 / (tau * tau)).exp();
        let diff = albedo.value(p) - albedo.value(q);
        value += omega * (diff.r.abs() + diff.g.abs() + diff.b.abs());
        let g = diff.map(f64::signum) * (omega * inv);
        grad[p] += g;
        grad[q] += g * -1.0;
    }
    Ok(AlbedoLoss {
        value: value * inv,
        grad,
        pixels: pairs.len(),
    })
}

#[derive(Debug, Clone)]
pub struct PseudoSupervision {
    pub value: f64,
    pub grad: Vec<Rgb>,
    /// The anchor had no valid pixels in common with the estimate; value is 0.
    pub empty_anchor: bool,
}

/// Mean squared LAB distance between the albedo and a fixed anchor albedo.
pub fn pseudo_supervision_loss(albedo: &PixelGrid<Rgb>, anchor: &PixelGrid<Rgb>) -> Result<PseudoSupervision> {
    albedo.ensure_same_dims(anchor)?;
    let mask = intersect_masks(&[albedo.mask(), anchor.mask()]);
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![Rgb::default(); albedo.len()];
    if count == 0 {
        return Ok(PseudoSupervision {
            value: 0.0,
            grad,
            empty_anchor: true,
        });
    }
    let inv = 1.0 / count as f64;
    let mut value = 0.0;
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let (la, j) = linear_rgb_to_lab_jacobian(albedo.value(i));
        let (lb, _) = linear_rgb_to_lab_jacobian(anchor.value(i));
        let d = la.to_vector() - lb.to_vector();
        value += d.norm_squared();
        grad[i] = Rgb::from_vector(j.transpose() * d * (2.0 * inv));
    }
    Ok(PseudoSupervision {
        value: value * inv,
        grad,
        empty_anchor: false,
    })
}

/// Everything the weighted objective of one view can depend on. Optional
/// inputs disable the terms that need them.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Display-encoded photograph.
    pub observed: &'a PixelGrid<Rgb>,
    pub normals: &'a PixelGrid<Normal>,
    /// Linear albedo.
    pub albedo: &'a PixelGrid<Rgb>,
    pub lighting: &'a ShLighting,
    pub lighting_params: Option<&'a LightingParams>,
    pub guide_normals: Option<&'a PixelGrid<Normal>>,
    pub anchor: Option<&'a PixelGrid<Rgb>>,
    /// The other view's albedo cross-projected into this one.
    pub partner_albedo: Option<&'a PixelGrid<Rgb>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub lighting_weight: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lighting_weight: 0.01,
            tau: DEFAULT_TAU,
            gamma: GAMMA,
        }
    }
}

/// Unweighted value of every term; skipped terms read 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub appearance: f64,
    pub normal: f64,
    pub albedo: f64,
    pub cross_render: f64,
    pub smoothness: f64,
    pub pseudo: f64,
    pub lighting: f64,
}

#[derive(Debug, Clone)]
pub struct TotalGradients {
    pub albedo: Vec<Rgb>,
    pub normals: Vec<Normal>,
    pub lighting: ShLighting,
    pub lighting_params: Vec<f64>,
    pub partner_albedo: Option<Vec<Rgb>>,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub terms: TermValues,
    pub grads: TotalGradients,
    pub albedo_scale: Option<f64>,
    pub empty_anchor: bool,
}

fn axpy<T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>>(acc: &mut [T], w: f64, g: &[T]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a = *a + *b * w;
    }
}

/// Weighted sum of all active terms and the matching weighted gradient.
pub fn total_loss(inputs: &LossInputs<'_>, settings: &LossSettings) -> Result<TotalLoss> {
    settings.weights.validate()?;
    if !(settings.lighting_weight >= 0.0) {
        return Err(Error::Domain("lighting weight must be non-negative".into()));
    }
    let w = &settings.weights;
    let n = inputs.albedo.len();
    let mut terms = TermValues::default();
    let mut grads = TotalGradients {
        albedo: vec![Rgb::default(); n],
        normals: vec![Normal::zeros(); n],
        lighting: ShLighting::zeros(),
        lighting_params: inputs.lighting_params.map_or_else(Vec::new, |p| vec![0.0; p.dim()]),
        partner_albedo: None,
    };
    let mut value = 0.0;
    let mut albedo_scale = None;
    let mut empty_anchor = false;

    if w.appearance > 0.0 {
        let t = render_appearance_loss(inputs.albedo, inputs.normals, inputs.lighting, inputs.observed, settings.gamma)?;
        terms.appearance = t.value;
        value += w.appearance * t.value;
        axpy(&mut grads.albedo, w.appearance, &t.grad_albedo);
        axpy(&mut grads.normals, w.appearance, &t.grad_normals);
        grads.lighting = grads.lighting.add(&t.grad_lighting.scaled(w.appearance));
    }
    if w.normal > 0.0 {
        if let Some(guide) = inputs.guide_normals {
            let t = normal_loss(inputs.normals, guide)?;
            terms.normal = t.value;
            value += w.normal * t.value;
            axpy(&mut grads.normals, w.normal, &t.grad);
        }
    }
    if let Some(partner) = inputs.partner_albedo {
        let mut g_partner = vec![Rgb::default(); n];
        if w.albedo > 0.0 {
            let t = albedo_consistency_loss(inputs.albedo, partner)?;
            terms.albedo = t.value;
            albedo_scale = Some(t.scale);
            value += w.albedo * t.value;
            axpy(&mut grads.albedo, w.albedo, &t.grad_own);
            axpy(&mut g_partner, w.albedo, &t.grad_partner);
        }
        if w.cross_render > 0.0 {
            let t = cross_render_loss(partner, inputs.normals, inputs.lighting, inputs.observed, settings.gamma)?;
            terms.cross_render = t.value;
            value += w.cross_render * t.value;
            axpy(&mut g_partner, w.cross_render, &t.grad_albedo);
            axpy(&mut grads.normals, w.cross_render, &t.grad_normals);
            grads.lighting = grads.lighting.add(&t.grad_lighting.scaled(w.cross_render));
        }
        if w.albedo > 0.0 || w.cross_render > 0.0 {
            grads.partner_albedo = Some(g_partner);
        }
    }
    if w.smoothness > 0.0 {
        let t = albedo_smoothness_loss(inputs.albedo, inputs.observed, settings.tau)?;
        terms.smoothness = t.value;
        value += w.smoothness * t.value;
        axpy(&mut grads.albedo, w.smoothness, &t.grad);
    }
    if w.pseudo > 0.0 {
        if let Some(anchor) = inputs.anchor {
            let t = pseudo_supervision_loss(inputs.albedo, anchor)?;
            empty_anchor = t.empty_anchor;
            terms.pseudo = t.value;
            value += w.pseudo * t.value;
            axpy(&mut grads.albedo, w.pseudo, &t.grad);
        }
    }
    if settings.lighting_weight > 0.0 {
        if let Some(p) = inputs.lighting_params {
            terms.lighting = prior_energy(p);
            value += settings.lighting_weight * terms.lighting;
            for (g, a) in grads.lighting_params.iter_mut().zip(&p.alpha) {
                *g += settings.lighting_weight * 2.0 * a;
            }
        }
    }
    Ok(TotalLoss {
        value,
        terms,
        grads,
        albedo_scale,
        empty_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn one(c: Rgb) -> PixelGrid<Rgb> {
        PixelGrid::filled(1, 1, c)
    }

    #[test]
    fn appearance_examples() {
        let a = PixelGrid::from_fn(3, 2, |x, y| Some(Rgb::new(0.1 * x as f64 + 0.2, 0.3, 0.1 * y as f64 + 0.4)));
        assert_eq!(appearance_loss(&a, &a).unwrap().value, 0.0);
        let v = appearance_loss(&one(Rgb::splat(0.0)), &one(Rgb::splat(1.0))).unwrap().value;
        assert!((v - 100.0).abs() < 1e-9);
        let empty: PixelGrid<Rgb> = PixelGrid::invalid(1, 1);
        assert!(matches!(appearance_loss(&empty, &one(Rgb::splat(1.0))), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn normal_loss_examples() {
        let z = PixelGrid::filled(1, 1, Normal::new(0.0, 0.0, 1.0));
        let x = PixelGrid::filled(1, 1, Normal::new(1.0, 0.0, 0.0));
        let mz = PixelGrid::filled(1, 1, Normal::new(0.0, 0.0, -1.0));
        assert_eq!(normal_loss(&z, &z).unwrap().value, 0.0);
        assert!((normal_loss(&z, &x).unwrap().value - PI / 2.0).abs() < 1e-15);
        assert!((normal_loss(&z, &mz).unwrap().value - PI).abs() < 1e-15);
        let g = normal_loss(&z, &z).unwrap().grad[0];
        assert!(g.iter().all(|v| v.is_finite()));
        let holes: PixelGrid<Normal> = PixelGrid::invalid(1, 1);
        assert!(normal_loss(&z, &holes).is_err());
    }

    #[test]
    fn optimal_scale_by_hand() {
        let (s, r) = optimal_scale(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s, 1.5);
        assert!((r - 0.5).abs() < 1e-15);
        assert!(optimal_scale(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn albedo_consistency_examples() {
        let a = PixelGrid::from_fn(4, 4, |x, y| Some(Rgb::new(0.2 + 0.1 * x as f64, 0.5, 0.3 + 0.05 * y as f64)));
        let t = albedo_consistency_loss(&a, &a).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-14);
        assert!(t.value < 1e-20);

        // A_i = 2·A_j in linear RGB: scale is the LAB projection coefficient
        let b = a.map(|c| c * 0.5);
        let t = albedo_consistency_loss(&a, &b).unwrap();
        let lab = |c: Rgb| crate::color::linear_rgb_to_lab(c).to_vector();
        let x: Vec<f64> = a.data().iter().flat_map(|c| lab(*c).iter().copied().collect::<Vec<_>>()).collect();
        let y: Vec<f64> = b.data().iter().flat_map(|c| lab(*c).iter().copied().collect::<Vec<_>>()).collect();
        let (s, r) = optimal_scale(&x, &y).unwrap();
        assert!((t.scale - s).abs() < 1e-12);
        assert!((t.value - r / 16.0).abs() < 1e-9);
        assert!(t.value > 0.0);

        let black = PixelGrid::filled(4, 4, Rgb::splat(0.0));
        assert!(albedo_consistency_loss(&a, &black).is_err());
    }

    #[test]
    fn cross_render_needs_valid_warp() {
        let dead: PixelGrid<Rgb> = PixelGrid::invalid(2, 2);
        let n = PixelGrid::filled(2, 2, Normal::new(0.0, 0.0, 1.0));
        let img = PixelGrid::filled(2, 2, Rgb::splat(0.5));
        assert!(matches!(
            cross_render_loss(&dead, &n, &ShLighting::ambient(1.0), &img, GAMMA),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn cross_render_with_own_albedo_is_appearance() {
        let a = PixelGrid::from_fn(4, 3, |x, y| Some(Rgb::new(0.3 + 0.1 * x as f64, 0.4, 0.2 + 0.1 * y as f64)));
        let n = PixelGrid::from_fn(4, 3, |x, y| Some(Normal::new(0.1 * x as f64, -0.1 * y as f64, 1.0).normalize()));
        let mut l = ShLighting::ambient(0.8);
        l.coeffs[1][3] = 0.2;
        let rendered = crate::sh::render_image(&n, &a, &l, Some(GAMMA)).unwrap().image;
        let observed = rendered.map(|c| c * 0.9);
        let cr = cross_render_loss(&a, &n, &l, &observed, GAMMA).unwrap().value;
        let ap = appearance_loss(&rendered, &observed).unwrap().value;
        assert!((cr - ap).abs() < 1e-12);
    }

    #[test]
    fn smoothness_examples() {
        let img = PixelGrid::filled(2, 1, Rgb::splat(0.5));
        let a = PixelGrid::from_vec(2, 1, vec![Rgb::splat(0.2), Rgb::splat(0.5)]).unwrap();
        let t = albedo_smoothness_loss(&a, &img, DEFAULT_TAU).unwrap();
        assert!((t.value - 0.9).abs() < 1e-15);
        let flat = PixelGrid::filled(5, 5, Rgb::new(0.3, 0.2, 0.6));
        assert_eq!(albedo_smoothness_loss(&flat, &img_of(5), DEFAULT_TAU).unwrap().value, 0.0);

        // albedo step across a strong chromaticity edge in the image
        let edge_img = PixelGrid::from_vec(2, 1, vec![Rgb::new(0.9, 0.05, 0.05), Rgb::new(0.05, 0.05, 0.9)]).unwrap();
        let t = albedo_smoothness_loss(&a, &edge_img, DEFAULT_TAU).unwrap();
        assert!(t.value < 1e-12);
    }

    fn img_of(n: usize) -> PixelGrid<Rgb> {
        PixelGrid::from_fn(n, n, |x, y| Some(Rgb::new(0.1 * x as f64, 0.1 * y as f64, 0.5)))
    }

    #[test]
    fn pseudo_examples() {
        let a = img_of(4).map(|c| c + Rgb::splat(0.1));
        assert_eq!(pseudo_supervision_loss(&a, &a).unwrap().value, 0.0);
        let dead: PixelGrid<Rgb> = PixelGrid::invalid(4, 4);
        let t = pseudo_supervision_loss(&a, &dead).unwrap();
        assert!(t.empty_anchor);
        assert_eq!(t.value, 0.0);
        assert!(pseudo_supervision_loss(&a, &img_of(3)).is_err());
    }

    #[test]
    fn total_with_zero_weights_is_zero() {
        let a = img_of(3).map(|c| c + Rgb::splat(0.2));
        let n = PixelGrid::filled(3, 3, Normal::new(0.0, 0.0, 1.0));
        let l = ShLighting::ambient(0.7);
        let p = LightingParams::new(vec![1.0, 2.0]);
        let inputs = LossInputs {
            observed: &a,
            normals: &n,
            albedo: &a,
            lighting: &l,
            lighting_params: Some(&p),
            guide_normals: Some(&n),
            anchor: Some(&a),
            partner_albedo: Some(&a),
        };
        let zero = LossSettings {
            weights: LossWeights::zero(),
            lighting_weight: 0.0,
            ..Default::default()
        };
        let t = total_loss(&inputs, &zero).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grads.partner_albedo.is_none());

        let only_light = LossSettings {
            weights: LossWeights::zero(),
            lighting_weight: 0.5,
            ..Default::default()
        };
        assert_eq!(total_loss(&inputs, &only_light).unwrap().value, 2.5);
    }

    #[test]
    fn rejects_negative_weights() {
        let mut w = LossWeights::default();
        w.smoothness = -0.1;
        assert!(w.validate().is_err());
    }
}
