//! Normals from gradients and depth, cross-view warping and pair selection.

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::grid::PixelGrid;
use crate::sh::Normal;

/// Per-pixel surface gradient `(w_u, w_v)`; the normal is `(−w_u, −w_v, 1)` normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    wu: PixelGrid<f64>,
    wv: PixelGrid<f64>,
}

impl GradientField {
    pub fn new(wu: PixelGrid<f64>, wv: PixelGrid<f64>) -> Result<Self> {
        wu.ensure_same_dims(&wv)?;
        if wu.mask() != wv.mask() {
            return Err(Error::Domain("gradient components must share a mask".into()));
        }
        if wu.data().iter().chain(wv.data()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("gradient field has non-finite values".into()));
        }
        Ok(Self { wu, wv })
    }

    pub fn zeros(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        let n = width * height;
        let wu = PixelGrid::new(width, height, vec![0.0; n], mask.to_vec())?;
        Ok(Self { wv: wu.clone(), wu })
    }

    /// Gradients reproducing `normals` where `nz > 0`; other pixels are invalid.
    pub fn from_normals(normals: &PixelGrid<Normal>) -> Self {
        let g = normals.filter_map(gradient_from_normal);
        Self {
            wu: g.map(|(u, _)| u),
            wv: g.map(|(_, v)| v),
        }
    }

    pub fn wu(&self) -> &PixelGrid<f64> {
        &self.wu
    }

    pub fn wv(&self) -> &PixelGrid<f64> {
        &self.wv
    }

    pub fn dims(&self) -> (usize, usize) {
        self.wu.dims()
    }

    pub fn mask(&self) -> &[bool] {
        self.wu.mask()
    }
}

pub fn normal_from_gradient(wu: f64, wv: f64) -> Normal {
    Vector3::new(-wu, -wv, 1.0) / (wu * wu + wv * wv + 1.0).sqrt()
}

pub fn gradient_from_normal(n: Normal) -> Option<(f64, f64)> {
    (n.z > 0.0).then(|| (-n.x / n.z, -n.y / n.z))
}

/// `(∂n/∂w_u, ∂n/∂w_v)` of [`normal_from_gradient`].
pub fn normal_gradient_jacobian(wu: f64, wv: f64) -> (Vector3<f64>, Vector3<f64>) {
    let s2 = wu * wu + wv * wv + 1.0;
    let s = s2.sqrt();
    let s3 = s2 * s;
    let nbar = Vector3::new(-wu, -wv, 1.0);
    let du = Vector3::new(-1.0 / s, 0.0, 0.0) - nbar * (wu / s3);
    let dv = Vector3::new(0.0, -1.0 / s, 0.0) - nbar * (wv / s3);
    (du, dv)
}

pub fn gradient_to_normals(g: &GradientField) -> PixelGrid<Normal> {
    g.wu.zip_with(&g.wv, normal_from_gradient).expect("components share dimensions")
}

/// A depth map `w(x, y)` (distance along the optical axis) with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedDepth {
    depth: PixelGrid<f64>,
    camera: Camera,
}

impl PosedDepth {
    pub fn new(depth: PixelGrid<f64>, camera: Camera) -> Result<Self> {
        for i in depth.valid_indices() {
            let w = depth.value(i);
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Domain(format!("depth must be positive at valid pixels, found {w}")));
            }
        }
        Ok(Self { depth, camera })
    }

    pub fn depth(&self) -> &PixelGrid<f64> {
        &self.depth
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// World-space point seen at pixel `(x, y)`.
    pub fn world_point(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let w = self.depth.get(x, y)?;
        let p = self.camera.backproject(x as f64, y as f64, w);
        Some(self.camera.camera_to_world(&p))
    }

    /// Mean of all backprojected valid pixels.
    pub fn centroid(&self) -> Option<Vector3<f64>> {
        let (w, _) = self.depth.dims();
        let mut acc = Vector3::zeros();
        let mut n = 0usize;
        for i in self.depth.valid_indices() {
            acc += self.world_point(i % w, i / w)?;
            n += 1;
        }
        (n > 0).then(|| acc / n as f64)
    }
}

/// Derivative of `w` along one axis at `pos` using central differences in the
/// interior and one-sided differences at the borders. `None` if any tap is a hole.
fn axis_derivative(sample: impl Fn(usize) -> Option<f64>, pos: usize, len: usize) -> Option<f64> {
    if len < 2 {
        return None;
    }
    if pos == 0 {
        Some(sample(1)? - sample(0)?)
    } else if pos == len - 1 {
        Some(sample(pos)? - sample(pos - 1)?)
    } else {
        Some(0.5 * (sample(pos + 1)? - sample(pos - 1)?))
    }
}

/// Guide normals from a perspective depth map:
/// `n ∝ (−f·w_x, −f·w_y, (x−cx)·w_x + (y−cy)·w_y + w)`.
pub fn normals_from_depth(d: &PosedDepth) -> PixelGrid<Normal> {
    let depth = &d.depth;
    let cam = &d.camera;
    let (w, h) = depth.dims();
    let values: Vec<Option<Normal>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let z = depth.get(x, y)?;
            let wx = axis_derivative(|k| depth.get(k, y), x, w)?;
            let wy = axis_derivative(|k| depth.get(x, k), y, h)?;
            let n = Vector3::new(
                -cam.f() * wx,
                -cam.f() * wy,
                (x as f64 - cam.cx()) * wx + (y as f64 - cam.cy()) * wy + z,
            );
            let len = n.norm();
            (len > 0.0 && len.is_finite()).then(|| n / len)
        })
        .collect();
    PixelGrid::from_fn(w, h, |x, y| values[y * w + x])
}

/// Values that can be bilinearly blended.
pub trait Interpolate: Copy + Default {
    fn blend(items: &[(Self, f64)]) -> Self;
}

impl Interpolate for f64 {
    fn blend(items: &[(Self, f64)]) -> Self {
        items.iter().map(|(v, w)| v * w).sum()
    }
}

impl Interpolate for Rgb {
    fn blend(items: &[(Self, f64)]) -> Self {
        items.iter().fold(Rgb::default(), |acc, (v, w)| acc + *v * *w)
    }
}

/// Normals are renormalised after blending.
impl Interpolate for Normal {
    fn blend(items: &[(Self, f64)]) -> Self {
        let s: Normal = items.iter().map(|(v, w)| v * *w).sum();
        let n = s.norm();
        if n > 0.0 {
            s / n
        } else {
            s
        }
    }
}

const SNAP: f64 = 1e-9;

/// Up to four bilinear taps into the source raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    idx: [usize; 4],
    weight: [f64; 4],
    len: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|k| (self.idx[k], self.weight[k]))
    }
}

/// Bilinear taps at continuous pixel position `(x, y)`. Taps with zero weight
/// are omitted; positions outside `[0, w−1] × [0, h−1]` give `None`.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Option<Taps> {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < SNAP {
            r
        } else {
            v
        }
    };
    let (x, y) = (snap(x), snap(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut taps = Taps {
        idx: [0; 4],
        weight: [0.0; 4],
        len: 0,
    };
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wx * wy;
            if wgt > 0.0 {
                taps.idx[taps.len] = (y0 + dy) * width + x0 + dx;
                taps.weight[taps.len] = wgt;
                taps.len += 1;
            }
        }
    }
    Some(taps)
}

/// Bilinear lookup; `None` out of bounds or if any contributing tap is invalid.
pub fn sample_bilinear<T: Interpolate>(grid: &PixelGrid<T>, x: f64, y: f64) -> Option<T> {
    let taps = bilinear_taps(x, y, grid.width(), grid.height())?;
    let mut items = [(T::default(), 0.0); 4];
    for (k, (i, w)) in taps.iter().enumerate() {
        items[k] = (grid.at(i)?, w);
    }
    Some(T::blend(&items[..taps.len]))
}

/// Pixel in `cam_other` where pixel `(x, y)` of `depth` lands.
pub fn project_pixel(depth: &PosedDepth, x: f64, y: f64, w: f64, cam_other: &Camera) -> Option<Point2<f64>> {
    let cam = &depth.camera;
    let world = cam.camera_to_world(&cam.backproject(x, y, w));
    cam_other.project(&cam_other.world_to_camera(&world))
}

/// Reverse warp from a source view into a target view, built from the target
/// depth and both cameras. Geometry only; source validity is checked when applied.
#[derive(Debug, Clone)]
pub struct Warp {
    target_dims: (usize, usize),
    source_dims: (usize, usize),
    taps: Vec<Option<Taps>>,
}

impl Warp {
    pub fn new(target: &PosedDepth, source_camera: &Camera, source_dims: (usize, usize)) -> Self {
        let (w, h) = target.depth.dims();
        let (sw, sh) = source_dims;
        let taps = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let z = target.depth.at(i)?;
                let p = project_pixel(target, (i % w) as f64, (i / w) as f64, z, source_camera)?;
                bilinear_taps(p.x, p.y, sw, sh)
            })
            .collect();
        Self {
            target_dims: (w, h),
            source_dims,
            taps,
        }
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.target_dims
    }

    fn check_source<T>(&self, source: &PixelGrid<T>) -> Result<()> {
        if source.dims() != self.source_dims {
            return Err(Error::DimensionMismatch {
                expected: self.source_dims,
                found: source.dims(),
            });
        }
        Ok(())
    }

    fn live_taps<'a, T: Copy + Default>(&'a self, i: usize, source: &PixelGrid<T>) -> Option<&'a Taps> {
        let t = self.taps[i].as_ref()?;
        t.iter().all(|(j, _)| source.is_valid(j)).then_some(t)
    }

    pub fn apply<T: Interpolate>(&self, source: &PixelGrid<T>) -> Result<PixelGrid<T>> {
        self.check_source(source)?;
        let (w, h) = self.target_dims;
        let mut out = PixelGrid::invalid(w, h);
        for i in 0..w * h {
            if let Some(t) = self.live_taps(i, source) {
                let mut items = [(T::default(), 0.0); 4];
                for (k, (j, wt)) in t.iter().enumerate() {
                    items[k] = (source.value(j), wt);
                }
                out.set(i, T::blend(&items[..t.len]));
            }
        }
        Ok(out)
    }

    /// Adjoint of [`apply`](Self::apply) for linear values: scatters target
    /// gradients back onto the source pixels.
    pub fn scatter<T: Copy + Default>(&self, grad: &PixelGrid<Rgb>, source: &PixelGrid<T>) -> Result<Vec<Rgb>> {
        self.check_source(source)?;
        let mut out = vec![Rgb::default(); source.len()];
        for i in grad.valid_indices() {
            if let Some(t) = self.live_taps(i, source) {
                for (j, wt) in t.iter() {
                    out[j] += grad.value(i) * wt;
                }
            }
        }
        Ok(out)
    }
}

/// Samples `source` (seen by `source_camera`) at the locations where the
/// target's valid pixels land.
pub fn cross_project<T: Interpolate>(
    source: &PixelGrid<T>,
    target: &PosedDepth,
    source_camera: &Camera,
) -> Result<PixelGrid<T>> {
    Warp::new(target, source_camera, source.dims()).apply(source)
}

/// An image with its MVS depth and camera.
#[derive(Debug, Clone)]
pub struct PosedImage {
    pub image: PixelGrid<Rgb>,
    pub depth: PosedDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    /// Camera-centre distance; `None` means half the median scene depth.
    pub camera_distance: Option<f64>,
    /// Backprojected-centroid distance; `None` means half the median scene depth.
    pub centroid_distance: Option<f64>,
    pub min_overlap: f64,
    /// Pairs whose histogram correlation exceeds this lack illumination change.
    pub max_histogram_correlation: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            camera_distance: None,
            centroid_distance: None,
            min_overlap: 0.3,
            max_histogram_correlation: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedThresholds {
    pub camera_distance: f64,
    pub centroid_distance: f64,
    pub min_overlap: f64,
    pub max_histogram_correlation: f64,
    pub median_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    CameraDistance,
    CentroidDistance,
    Overlap,
    NoIlluminationChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub i: usize,
    pub j: usize,
    pub camera_distance: f64,
    pub centroid_distance: f64,
    pub overlap: Option<f64>,
    pub histogram_correlation: Option<f64>,
    pub rejected: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSelection {
    pub pairs: Vec<(usize, usize)>,
    pub thresholds: ResolvedThresholds,
    pub reports: Vec<PairReport>,
}

pub const HISTOGRAM_BINS: usize = 64;

fn grey(c: Rgb) -> f64 {
    c.sum() / 3.0
}

fn histogram(values: impl Iterator<Item = f64>) -> [f64; HISTOGRAM_BINS] {
    let mut h = [0.0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1.0;
    }
    h
}

/// Pearson correlation; degenerate (constant) histograms count as perfectly
/// correlated when identical and uncorrelated otherwise.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

/// Fraction of the target's valid-depth pixels that land on valid source
/// depth, plus the two grey-level histograms over those pixels.
fn overlap_stats(target: &PosedImage, source: &PosedImage) -> Result<(f64, f64)> {
    let warp = Warp::new(&target.depth, source.depth.camera(), source.image.dims());
    let source_live = source.image.restrict(source.depth.depth().mask())?;
    let warped = warp.apply(&source_live)?;
    let target_valid = target.depth.depth().valid_count();
    let both: Vec<usize> = warped
        .valid_indices()
        .filter(|&i| target.image.is_valid(i) && target.depth.depth().is_valid(i))
        .collect();
    let overlap = if target_valid == 0 {
        0.0
    } else {
        both.len() as f64 / target_valid as f64
    };
    let ha = histogram(both.iter().map(|&i| grey(target.image.value(i))));
    let hb = histogram(both.iter().map(|&i| grey(warped.value(i))));
    Ok((overlap, pearson(&ha, &hb)))
}

pub fn median_depth(views: &[PosedImage]) -> f64 {
    let mut all: Vec<f64> = views
        .iter()
        .flat_map(|v| v.depth.depth().valid_indices().map(move |i| v.depth.depth().value(i)))
        .collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(f64::total_cmp);
    let m = all.len() / 2;
    if all.len() % 2 == 1 {
        all[m]
    } else {
        0.5 * (all[m - 1] + all[m])
    }
}

/// Candidate Siamese pairs: nearby cameras looking at nearby geometry, enough
/// mutual coverage and a visible change of illumination.
pub fn select_pairs(views: &[PosedImage], thresholds: &PairThresholds) -> Result<PairSelection> {
    let median = median_depth(views);
    let resolved = ResolvedThresholds {
        camera_distance: thresholds.camera_distance.unwrap_or(0.5 * median),
        centroid_distance: thresholds.centroid_distance.unwrap_or(0.5 * median),
        min_overlap: thresholds.min_overlap,
        max_histogram_correlation: thresholds.max_histogram_correlation,
        median_depth: median,
    };
    let centroids: Vec<Option<Vector3<f64>>> = views.iter().map(|v| v.depth.centroid()).collect();
    let candidates: Vec<(usize, usize)> = (0..views.len())
        .flat_map(|i| (i + 1..views.len()).map(move |j| (i, j)))
        .collect();
    let reports: Vec<PairReport> = candidates
        .par_iter()
        .map(|&(i, j)| -> Result<PairReport> {
            let (a, b) = (&views[i], &views[j]);
            let camera_distance = (a.depth.camera().center() - b.depth.camera().center()).norm();
            let centroid_distance = match (centroids[i], centroids[j]) {
                (Some(p), Some(q)) => (p - q).norm(),
                _ => f64::INFINITY,
            };
            let mut report = PairReport {
                i,
                j,
                camera_distance,
                centroid_distance,
                overlap: None,
                histogram_correlation: None,
                rejected: None,
            };
            if !(camera_distance < resolved.camera_distance) {
                report.rejected = Some(Rejection::CameraDistance);
                return Ok(report);
            }
            if !(centroid_distance < resolved.centroid_distance) {
                report.rejected = Some(Rejection::CentroidDistance);
                return Ok(report);
            }
            let (o_ij, c_ij) = overlap_stats(a, b)?;
            let (o_ji, c_ji) = overlap_stats(b, a)?;
            let overlap = o_ij.min(o_ji);
            let corr = c_ij.max(c_ji);
            report.overlap = Some(overlap);
            if overlap < resolved.min_overlap {
                report.rejected = Some(Rejection::Overlap);
                return Ok(report);
            }
            report.histogram_correlation = Some(corr);
            if corr > resolved.max_histogram_correlation {
                report.rejected = Some(Rejection::NoIlluminationChange);
            }
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let pairs = reports.iter().filter(|r| r.rejected.is_none()).map(|r| (r.i, r.j)).collect();
    Ok(PairSelection {
        pairs,
        thresholds: resolved,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::rotation_y;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn angle_deg(a: &Normal, b: &Normal) -> f64 {
        a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn gradient_examples() {
        let n = normal_from_gradient(0.0, 0.0);
        assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
        let n = normal_from_gradient(1.0, 0.0);
        assert!((n - Vector3::new(-1.0, 0.0, 1.0) / 2f64.sqrt()).norm() < 1e-15);
        let n = normal_from_gradient(3.0, 4.0);
        assert!((n - Vector3::new(-3.0, -4.0, 1.0) / 26f64.sqrt()).norm() < 1e-15);
    }

    #[test]
    fn gradient_jacobian_matches_finite_differences() {
        let (wu, wv) = (0.7, -1.3);
        let (du, dv) = normal_gradient_jacobian(wu, wv);
        let h = 1e-6;
        let fu = (normal_from_gradient(wu + h, wv) - normal_from_gradient(wu - h, wv)) / (2.0 * h);
        let fv = (normal_from_gradient(wu, wv + h) - normal_from_gradient(wu, wv - h)) / (2.0 * h);
        assert!((fu - du).norm() < 1e-8);
        assert!((fv - dv).norm() < 1e-8);
    }

    proptest! {
        #[test]
        fn gradient_normals_are_unit_and_front_facing(wu in -1e3f64..1e3, wv in -1e3f64..1e3) {
            let n = normal_from_gradient(wu, wv);
            prop_assert!(n.z > 0.0);
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            let (u, v) = gradient_from_normal(n).unwrap();
            prop_assert!((u - wu).abs() < 1e-9 * (1.0 + wu.abs()) && (v - wv).abs() < 1e-9 * (1.0 + wv.abs()));
        }
    }

    fn plane_depth(size: usize, f: f64, c: f64, plane: Vector3<f64>, d: f64) -> PosedDepth {
        let depth = PixelGrid::from_fn(size, size, |x, y| {
            let ray = Vector3::new((x as f64 - c) / f, (y as f64 - c) / f, 1.0);
            Some(d / plane.dot(&ray))
        });
        PosedDepth::new(depth, Camera::looking_forward(f, c, c).unwrap()).unwrap()
    }

    #[test]
    fn constant_depth_is_frontal() {
        let d = PosedDepth::new(PixelGrid::filled(8, 8, 3.0), Camera::looking_forward(10.0, 2.0, 5.0).unwrap()).unwrap();
        let n = normals_from_depth(&d);
        for i in 0..n.len() {
            assert_eq!(n.at(i), Some(Vector3::new(0.0, 0.0, 1.0)));
        }
    }

    #[test]
    fn slanted_plane_matches_analytic_normal() {
        let plane = Vector3::new(0.3, -0.2, 1.0).normalize();
        let d = plane_depth(64, 500.0, 32.0, plane, 2.0);
        let n = normals_from_depth(&d);
        for y in 1..63 {
            for x in 1..63 {
                let got = n.get(x, y).unwrap();
                assert!(angle_deg(&got, &plane) < 0.5);
            }
        }
    }

    #[test]
    fn hole_invalidates_its_neighbourhood() {
        let mut depth = PixelGrid::filled(7, 7, 2.0);
        depth.invalidate(3 * 7 + 3);
        let d = PosedDepth::new(depth, Camera::looking_forward(10.0, 3.0, 3.0).unwrap()).unwrap();
        let n = normals_from_depth(&d);
        let invalid: Vec<(usize, usize)> = (0..49).filter(|&i| !n.is_valid(i)).map(|i| (i % 7, i / 7)).collect();
        assert_eq!(invalid, vec![(3, 2), (2, 3), (3, 3), (4, 3), (3, 4)]);
    }

    #[test]
    fn border_uses_one_sided_differences() {
        let plane = Vector3::new(0.0, 0.0, 1.0);
        let d = plane_depth(5, 50.0, 2.0, plane, 1.0);
        let n = normals_from_depth(&d);
        assert_eq!(n.valid_count(), 25);
    }

    #[test]
    fn bilinear_taps_skip_zero_weights() {
        let t = bilinear_taps(3.0, 2.0, 4, 3).unwrap();
        assert_eq!(t.iter().collect::<Vec<_>>(), vec![(11, 1.0)]);
        assert!(bilinear_taps(3.0 + 1e-6, 2.0, 4, 3).is_none());
        assert!(bilinear_taps(-0.1, 0.0, 4, 3).is_none());
        let t = bilinear_taps(0.25, 0.5, 4, 3).unwrap();
        let total: f64 = t.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(t.iter().count(), 4);
    }

    fn textured(w: usize, h: usize) -> PixelGrid<Rgb> {
        PixelGrid::from_fn(w, h, |x, y| {
            Some(Rgb::new(
                (x as f64 * 0.37).sin() * 0.5 + 0.5,
                (y as f64 * 0.23).cos() * 0.5 + 0.5,
                ((x + y) as f64 * 0.11).sin() * 0.5 + 0.5,
            ))
        })
    }

    #[test]
    fn identity_pose_is_identity_warp() {
        let src = textured(20, 15);
        let cam = Camera::new(30.0, 9.5, 7.0, rotation_y(0.1), Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let depth = PosedDepth::new(PixelGrid::from_fn(20, 15, |x, y| Some(2.0 + 0.05 * x as f64 + 0.02 * y as f64)), cam).unwrap();
        let out = cross_project(&src, &depth, &cam).unwrap();
        assert_eq!(out.valid_count(), 300);
        for i in 0..300 {
            assert!((out.value(i) - src.value(i)).to_vector().amax() < 1e-9);
        }
    }

    #[test]
    fn sideways_translation_shifts_uniformly() {
        // source camera displaced by Δt along x: X_s = X_t - Δt, so x_s = x_t - f·Δt / w
        let (f, w, dt) = (40.0, 4.0, 0.2);
        let shift = f * dt / w;
        assert_eq!(shift, 2.0);
        let target_cam = Camera::looking_forward(f, 10.0, 5.0).unwrap();
        let source_cam = Camera::new(f, 10.0, 5.0, Matrix3::identity(), Vector3::new(-dt, 0.0, 0.0)).unwrap();
        let depth = PosedDepth::new(PixelGrid::filled(20, 10, w), target_cam).unwrap();
        let src = textured(20, 10);
        let out = cross_project(&src, &depth, &source_cam).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                match out.get(x, y) {
                    Some(v) => {
                        assert!(x >= 2);
                        assert!((v - src.get(x - 2, y).unwrap()).to_vector().amax() < 1e-9);
                    }
                    None => assert!(x < 2, "pixel {x},{y} should land inside"),
                }
            }
        }
    }

    #[test]
    fn holes_in_source_propagate() {
        let cam = Camera::looking_forward(10.0, 2.0, 2.0).unwrap();
        let shifted = Camera::new(10.0, 2.0, 2.0, Matrix3::identity(), Vector3::new(-0.05, 0.0, 0.0)).unwrap();
        let depth = PosedDepth::new(PixelGrid::filled(5, 5, 1.0), cam).unwrap();
        let mut src = textured(5, 5);
        src.invalidate(2 * 5 + 2);
        // shift of half a pixel: targets (2,2) and (3,2) both touch the hole
        let out = cross_project(&src, &depth, &shifted).unwrap();
        assert!(!out.is_valid(2 * 5 + 2));
        assert!(!out.is_valid(2 * 5 + 3));
        assert!(out.is_valid(1 * 5 + 2));
    }

    #[test]
    fn scatter_is_adjoint_of_apply() {
        let cam = Camera::looking_forward(12.0, 4.0, 4.0).unwrap();
        let other = Camera::new(12.0, 4.0, 4.0, rotation_y(0.05), Vector3::new(-0.07, 0.03, 0.0)).unwrap();
        let depth = PosedDepth::new(PixelGrid::from_fn(9, 9, |x, _| Some(3.0 + 0.1 * x as f64)), cam).unwrap();
        let warp = Warp::new(&depth, &other, (9, 9));
        let src = textured(9, 9);
        let g = textured(9, 9).map(|c| c * 0.7 + Rgb::splat(0.1));
        let fwd = warp.apply(&src).unwrap();
        let lhs: f64 = fwd.valid_indices().map(|i| (fwd.value(i) * g.value(i)).sum()).sum();
        let back = warp.scatter(&g.restrict(fwd.mask()).unwrap(), &src).unwrap();
        let rhs: f64 = back.iter().zip(src.data()).map(|(a, b)| (*a * *b).sum()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn view(image: PixelGrid<Rgb>, cam: Camera, depth_value: f64) -> PosedImage {
        let (w, h) = image.dims();
        PosedImage {
            image,
            depth: PosedDepth::new(PixelGrid::filled(w, h, depth_value), cam).unwrap(),
        }
    }

    #[test]
    fn pair_with_itself_is_rejected_for_lack_of_illumination_change() {
        let cam = Camera::looking_forward(30.0, 15.5, 15.5).unwrap();
        let v = view(textured(32, 32), cam, 5.0);
        let sel = select_pairs(&[v.clone(), v], &PairThresholds::default()).unwrap();
        assert!(sel.pairs.is_empty());
        let r = &sel.reports[0];
        assert_eq!(r.rejected, Some(Rejection::NoIlluminationChange));
        assert!((r.histogram_correlation.unwrap() - 1.0).abs() < 1e-12);
        assert!((sel.thresholds.median_depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn brightened_copy_is_accepted() {
        let cam = Camera::looking_forward(30.0, 15.5, 15.5).unwrap();
        let img = textured(32, 32);
        let bright = img.map(|c| c.map(|v| v.powf(1.0 / 2.2)));
        let sel = select_pairs(&[view(img, cam, 5.0), view(bright, cam, 5.0)], &PairThresholds::default()).unwrap();
        assert_eq!(sel.pairs, vec![(0, 1)]);
        assert!(sel.reports[0].histogram_correlation.unwrap() < 0.9);
    }

    #[test]
    fn opposite_cameras_do_not_overlap() {
        let a = Camera::looking_forward(30.0, 15.5, 15.5).unwrap();
        let b = Camera::new(30.0, 15.5, 15.5, rotation_y(std::f64::consts::PI), Vector3::zeros()).unwrap();
        let thresholds = PairThresholds {
            camera_distance: Some(1.0),
            centroid_distance: Some(100.0),
            ..Default::default()
        };
        let img = textured(32, 32);
        let sel = select_pairs(&[view(img.clone(), a, 5.0), view(img.map(|c| c * 0.5), b, 5.0)], &thresholds).unwrap();
        assert!(sel.pairs.is_empty());
        assert_eq!(sel.reports[0].rejected, Some(Rejection::Overlap));
        assert!(sel.reports[0].overlap.unwrap() < 1e-12);
        // with default thresholds the centroid test already rejects it
        let sel = select_pairs(&[view(img.clone(), a, 5.0), view(img, b, 5.0)], &PairThresholds::default()).unwrap();
        assert_eq!(sel.reports[0].rejected, Some(Rejection::CentroidDistance));
    }
}
