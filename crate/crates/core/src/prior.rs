//! Statistical model of natural spherical-harmonic illumination.
//!
//! Environments are normalised to unit Frobenius norm, augmented with
//! rotations (yaw about the vertical axis, pitch and roll about the other two)
//! and summarised by a Gaussian: `vec(L) = P · diag(σ) · α + vec(L̄)` with
//! standardised parameters `α ~ N(0, I)`.

use std::f64::consts::PI;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{rotation_x, rotation_y, rotation_z};
use crate::error::{Error, Result};
use crate::sh::{sh_rotation, ShLighting, ShRotation};

/// Number of principal directions kept by default.
pub const DEFAULT_DIM: usize = 18;

/// Yaw samples: full turn in π/18 steps.
pub const YAW_STEPS: usize = 36;
/// Pitch and roll samples each: −π/6..=π/6 in π/18 steps.
pub const TILT_STEPS: usize = 7;
pub const ANGLE_STEP: f64 = PI / 18.0;

pub const FORMAT_NAME: &str = "irlab-illumination-prior";
pub const FORMAT_VERSION: u32 = 1;

/// Scales at or below this fraction of the largest are treated as zero by
/// [`IlluminationPrior::encode`].
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LightingParams {
    pub alpha: Vec<f64>,
}

impl LightingParams {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { alpha: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }
}

/// `‖α‖²`, the negative log-density of the standardised parameters up to a constant.
pub fn prior_energy(p: &LightingParams) -> f64 {
    p.alpha.iter().map(|a| a * a).sum()
}

pub fn normalize_lighting(l: &ShLighting) -> Result<ShLighting> {
    let n = l.frobenius_norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalise a zero or non-finite lighting matrix".into()));
    }
    Ok(l.scaled(1.0 / n))
}

/// The `36 × 7 × 7` augmentation rotations, yaw-major then pitch then roll.
/// Each is `roll(z) · pitch(x) · yaw(y)`.
pub fn augmentation_rotations() -> Vec<Matrix3<f64>> {
    let tilt = |i: usize| -PI / 6.0 + i as f64 * ANGLE_STEP;
    let mut out = Vec::with_capacity(YAW_STEPS * TILT_STEPS * TILT_STEPS);
    for yi in 0..YAW_STEPS {
        let yaw = rotation_y(yi as f64 * ANGLE_STEP);
        for pi in 0..TILT_STEPS {
            let pitch = rotation_x(tilt(pi));
            for ri in 0..TILT_STEPS {
                out.push(rotation_z(tilt(ri)) * pitch * yaw);
            }
        }
    }
    out
}

/// Every input rotated by every augmentation rotation, input-major.
pub fn augment(set: &[ShLighting]) -> Result<Vec<ShLighting>> {
    if set.is_empty() {
        return Err(Error::InsufficientData("augment needs at least one environment".into()));
    }
    // the environment is turned by R, so coefficients transform with M(Rᵀ)
    let ops: Vec<ShRotation> = augmentation_rotations()
        .iter()
        .map(|r| sh_rotation(&r.transpose()))
        .collect::<Result<_>>()?;
    Ok(set
        .par_iter()
        .flat_map_iter(|l| ops.iter().map(move |m| l.transformed(m)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationPrior {
    mean: [f64; 27],
    /// 27 × D, orthonormal columns.
    components: DMatrix<f64>,
    scales: Vec<f64>,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub params: LightingParams,
    /// Dimensions whose scale is zero; their coordinate was set to 0.
    pub degenerate: Vec<usize>,
}

impl IlluminationPrior {
    pub fn from_parts(mean: [f64; 27], components: DMatrix<f64>, scales: Vec<f64>, samples: usize) -> Result<Self> {
        let d = scales.len();
        if components.nrows() != 27 || components.ncols() != d {
            return Err(Error::Format(format!(
                "components must be 27x{d}, got {}x{}",
                components.nrows(),
                components.ncols()
            )));
        }
        let gram = components.transpose() * &components;
        if (gram - DMatrix::identity(d, d)).norm() >= 1e-9 {
            return Err(Error::Format("prior components are not orthonormal".into()));
        }
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Format("prior scales must be finite and non-negative".into()));
        }
        if scales.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Format("prior scales must be non-increasing".into()));
        }
        Ok(Self {
            mean,
            components,
            scales,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    pub fn mean(&self) -> &[f64; 27] {
        &self.mean
    }

    pub fn mean_lighting(&self) -> ShLighting {
        ShLighting::from_slice27(&self.mean).expect("27 entries")
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Number of (augmented) environments the model was fitted on.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// `P · diag(σ)`, the Jacobian of [`decode`](Self::decode).
    pub fn scaled_components(&self) -> DMatrix<f64> {
        let mut m = self.components.clone();
        for (j, s) in self.scales.iter().enumerate() {
            m.column_mut(j).scale_mut(*s);
        }
        m
    }

    pub fn decode(&self, p: &LightingParams) -> Result<ShLighting> {
        if p.dim() != self.dim() {
            return Err(Error::Domain(format!(
                "prior has {} dimensions, parameters have {}",
                self.dim(),
                p.dim()
            )));
        }
        let v = self.scaled_components() * DVector::from_column_slice(&p.alpha) + DVector::from_column_slice(&self.mean);
        ShLighting::from_slice27(v.as_slice())
    }

    pub fn encode(&self, l: &ShLighting) -> Encoded {
        let centered = DVector::from_iterator(27, l.to_vec27().iter().zip(&self.mean).map(|(v, m)| v - m));
        let proj = self.components.transpose() * centered;
        let s_max = self.scales.first().copied().unwrap_or(0.0);
        let mut degenerate = Vec::new();
        let alpha = proj
            .iter()
            .zip(&self.scales)
            .enumerate()
            .map(|(j, (p, s))| {
                if *s > SCALE_FLOOR * s_max && *s > 0.0 {
                    p / s
                } else {
                    degenerate.push(j);
                    0.0
                }
            })
            .collect();
        Encoded {
            params: LightingParams::new(alpha),
            degenerate,
        }
    }

    /// Root-mean-square distance between each environment and its projection
    /// onto the model.
    pub fn reconstruction_error(&self, set: &[ShLighting]) -> Result<f64> {
        let mut acc = 0.0;
        for l in set {
            let back = self.decode(&self.encode(l).params)?;
            let d = l.add(&back.scaled(-1.0)).frobenius_norm();
            acc += d * d;
        }
        Ok((acc / set.len().max(1) as f64).sqrt())
    }

    pub fn to_json(&self) -> String {
        let file = PriorFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dim: self.dim(),
            samples: self.samples,
            matrices: PriorMatrices {
                mean: EncodedMatrix::new(27, 1, &self.mean),
                components: EncodedMatrix::new(27, self.dim(), &row_major(&self.components)),
                scales: EncodedMatrix::new(self.dim(), 1, &self.scales),
            },
        };
        serde_json::to_string_pretty(&file).expect("prior serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PriorFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("prior model: {e}")))?;
        if file.format != FORMAT_NAME {
            return Err(Error::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported prior version {}", file.version)));
        }
        let d = file.dim;
        let mean = file.matrices.mean.decode(27, 1)?;
        let comps = file.matrices.components.decode(27, d)?;
        let scales = file.matrices.scales.decode(d, 1)?;
        let mut m = [0.0; 27];
        m.copy_from_slice(&mean);
        Self::from_parts(m, DMatrix::from_row_slice(27, d, &comps), scales, file.samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    format: String,
    version: u32,
    dim: usize,
    samples: usize,
    matrices: PriorMatrices,
}

#[derive(Serialize, Deserialize)]
struct PriorMatrices {
    mean: EncodedMatrix,
    components: EncodedMatrix,
    scales: EncodedMatrix,
}

/// Row-major little-endian f64 payload in base64.
#[derive(Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    dtype: String,
    data: String,
}

impl EncodedMatrix {
    fn new(rows: usize, cols: usize, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            rows,
            cols,
            dtype: "f64le".into(),
            data: BASE64.encode(bytes),
        }
    }

    fn decode(&self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        if self.dtype != "f64le" || self.rows != rows || self.cols != cols {
            return Err(Error::Format(format!(
                "expected {rows}x{cols} f64le matrix, got {}x{} {}",
                self.rows, self.cols, self.dtype
            )));
        }
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
        if bytes.len() != rows * cols * 8 {
            return Err(Error::Format("matrix payload has the wrong length".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// PCA of the vectorised environments. Uses the unbiased sample covariance;
/// `σ_d` is the square root of the d-th largest eigenvalue.
pub fn fit_prior(set: &[ShLighting], dim: usize) -> Result<IlluminationPrior> {
    if dim == 0 || dim > 27 {
        return Err(Error::Domain(format!("prior dimension must be in 1..=27, got {dim}")));
    }
    if set.len() <= dim {
        return Err(Error::InsufficientData(format!(
            "fitting {dim} dimensions needs more than {dim} environments, got {}",
            set.len()
        )));
    }
    let n = set.len() as f64;
    let mut mean = [0.0; 27];
    for l in set {
        for (m, v) in mean.iter_mut().zip(l.to_vec27()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(27, 27);
    for l in set {
        let v = l.to_vec27();
        let d = DVector::from_iterator(27, v.iter().zip(&mean).map(|(a, b)| a - b));
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..27).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = DMatrix::zeros(27, dim);
    let mut scales = Vec::with_capacity(dim);
    for (j, &k) in order.iter().take(dim).enumerate() {
        components.set_column(j, &eig.eigenvectors.column(k));
        scales.push(eig.eigenvalues[k].max(0.0).sqrt());
    }
    IlluminationPrior::from_parts(mean, components, scales, set.len())
}

/// Normalise, optionally augment, then fit.
pub fn build_prior(environments: &[ShLighting], dim: usize, with_augmentation: bool) -> Result<IlluminationPrior> {
    let normalised: Vec<ShLighting> = environments.iter().map(normalize_lighting).collect::<Result<_>>()?;
    if with_augmentation {
        fit_prior(&augment(&normalised)?, dim)
    } else {
        fit_prior(&normalised, dim)
    }
}

/// Parses an SH coefficient dataset: one environment per line, 27
/// whitespace-separated numbers (R row, G row, B row). Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_coefficients(text: &str) -> Result<Vec<ShLighting>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 27 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "line {}: expected 27 finite coefficients, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        out.push(ShLighting::from_slice27(&vals)?);
    }
    Ok(out)
}

pub fn format_coefficients(set: &[ShLighting]) -> String {
    let mut s = String::new();
    for l in set {
        let line: Vec<String> = l.to_vec27().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, seed: u64) -> Vec<ShLighting> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ShLighting::from_slice27(&v).unwrap()
            })
            .collect()
    }

    #[test]
    fn normalize_examples() {
        let mut l = ShLighting::zeros();
        l.coeffs[1][4] = 5.0;
        assert_eq!(normalize_lighting(&l).unwrap().coeffs[1][4], 1.0);
        let unit = normalize_lighting(&random_set(1, 1)[0]).unwrap();
        let again = normalize_lighting(&unit).unwrap();
        assert!(again.to_vec27().iter().zip(unit.to_vec27()).all(|(a, b)| (a - b).abs() < 1e-15));
        for l in random_set(20, 2) {
            assert!((normalize_lighting(&l).unwrap().frobenius_norm() - 1.0).abs() < 1e-12);
        }
        assert!(normalize_lighting(&ShLighting::zeros()).is_err());
    }

    #[test]
    fn energy_examples() {
        assert_eq!(prior_energy(&LightingParams::zeros(18)), 0.0);
        let mut e = vec![0.0; 18];
        e[3] = 1.0;
        assert_eq!(prior_energy(&LightingParams::new(e)), 1.0);
        let mut v = vec![0.0; 18];
        v[0] = 3.0;
        v[1] = 4.0;
        assert_eq!(prior_energy(&LightingParams::new(v)), 25.0);
    }

    #[test]
    fn rotation_grid_spans_stated_ranges() {
        let rots = augmentation_rotations();
        assert_eq!(rots.len(), 36 * 7 * 7);
        let tilt: Vec<f64> = (0..TILT_STEPS).map(|i| -PI / 6.0 + i as f64 * ANGLE_STEP).collect();
        assert!((tilt[0] + PI / 6.0).abs() < 1e-15);
        assert!((tilt[6] - PI / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_input_gives_1764() {
        assert_eq!(augment(&random_set(1, 3)).unwrap().len(), 1764);
        assert!(augment(&[]).is_err());
    }

    #[test]
    fn isotropic_light_is_rotation_invariant() {
        let out = augment(&[ShLighting::ambient(0.4)]).unwrap();
        for l in &out {
            assert!(l.add(&ShLighting::ambient(-0.4)).frobenius_norm() < 1e-9);
        }
    }

    #[test]
    fn augmentation_keeps_constant_band() {
        let set = random_set(2, 4);
        let out = augment(&set).unwrap();
        for (i, l) in out.iter().enumerate() {
            let src = &set[i / 1764];
            for c in 0..3 {
                assert!((l.coeffs[c][0] - src.coeffs[c][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_inputs_give_zero_scales() {
        let l = random_set(1, 5)[0];
        let p = fit_prior(&vec![l; 30], DEFAULT_DIM).unwrap();
        assert_eq!(p.dim(), 18);
        assert!(p.scales().iter().all(|s| *s < 1e-12));
        for (a, b) in p.mean().iter().zip(l.to_vec27()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_pca() {
        let m = random_set(1, 6)[0];
        let v = random_set(1, 7)[0];
        let set = vec![m.add(&v), m.add(&v.scaled(-1.0))];
        let p = fit_prior(&set, 1).unwrap();
        // covariance = (v vᵀ + v vᵀ) / (2 - 1) = 2 v vᵀ, so σ₁ = √2 ‖v‖
        assert!((p.scales()[0] - 2f64.sqrt() * v.frobenius_norm()).abs() < 1e-12);
        let dir = p.components().column(0);
        let vn = v.to_vec27();
        let cos: f64 = dir.iter().zip(vn).map(|(a, b)| a * b).sum::<f64>() / v.frobenius_norm();
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        assert!(p.reconstruction_error(&set).unwrap() < 1e-12);
    }

    #[test]
    fn fit_requires_more_samples_than_dims() {
        assert!(matches!(fit_prior(&random_set(18, 1), 18), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn decode_at_zero_is_mean_and_encode_inverts_decode() {
        let p = fit_prior(&random_set(60, 8), 18).unwrap();
        assert_eq!(p.decode(&LightingParams::zeros(18)).unwrap(), p.mean_lighting());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = LightingParams::new((0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let back = p.encode(&p.decode(&a).unwrap());
        assert!(back.degenerate.is_empty());
        for (x, y) in back.params.alpha.iter().zip(&a.alpha) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn off_subspace_residual_is_complement_norm() {
        let p = fit_prior(&random_set(60, 10), 10).unwrap();
        let l = random_set(1, 11)[0];
        let back = p.decode(&p.encode(&l).params).unwrap();
        let residual = l.add(&back.scaled(-1.0)).frobenius_norm();
        // oracle: project with the complete 27-dimensional eigenbasis
        let full = fit_prior(&random_set(60, 10), 27).unwrap();
        let centered = DVector::from_iterator(27, l.to_vec27().iter().zip(full.mean()).map(|(a, b)| a - b));
        let coords = full.components().transpose() * centered;
        let complement: f64 = coords.iter().skip(10).map(|c| c * c).sum::<f64>().sqrt();
        assert!((residual - complement).abs() < 1e-10);
    }

    #[test]
    fn zero_scale_dimension_is_flagged() {
        // data living in a 2-dimensional affine subspace
        let base = random_set(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set: Vec<ShLighting> = (0..40)
            .map(|_| base[0].add(&base[1].scaled(rng.gen_range(-1.0..1.0))).add(&base[2].scaled(rng.gen_range(-1.0..1.0))))
            .collect();
        let p = fit_prior(&set, 4).unwrap();
        let e = p.encode(&set[0]);
        assert_eq!(e.degenerate, vec![2, 3]);
        assert_eq!(e.params.alpha[2], 0.0);
    }

    #[test]
    fn reconstruction_improves_with_dimension() {
        let set = random_set(80, 14);
        let mut last = f64::INFINITY;
        for d in 1..=27 {
            let err = fit_prior(&set, d).unwrap().reconstruction_error(&set).unwrap();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn decode_is_lipschitz() {
        let p = fit_prior(&random_set(60, 15), 18).unwrap();
        let bound = p.scales()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..50 {
            let a: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let ad: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
            let l0 = p.decode(&LightingParams::new(a)).unwrap();
            let l1 = p.decode(&LightingParams::new(ad)).unwrap();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(l1.add(&l0.scaled(-1.0)).frobenius_norm() <= bound * dn + 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = fit_prior(&random_set(40, 17), 18).unwrap();
        let back = IlluminationPrior::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
        let broken = p.to_json().replace(FORMAT_NAME, "something-else");
        assert!(IlluminationPrior::from_json(&broken).is_err());
    }

    #[test]
    fn coefficient_text_round_trip() {
        let set = random_set(5, 18);
        let text = format!("# five environments\n\n{}", format_coefficients(&set));
        assert_eq!(parse_coefficients(&text).unwrap(), set);
        assert!(parse_coefficients("1 2 3\n").is_err());
        assert!(parse_coefficients(&"x ".repeat(27)).is_err());
    }
}
