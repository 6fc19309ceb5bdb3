//! Order-2 spherical-harmonic Lambertian shading.
//!
//! Shading is `L · b(n)` where `L` is a 3×9 matrix (one row per colour channel)
//! and `b` the unnormalised order-2 basis
//! `[1, nx, ny, nz, 3nz²−1, nx·ny, nx·nz, ny·nz, nx²−ny²]`.
//! A pixel's linear intensity is the albedo times its shading.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{Rgb, GAMMA};
use crate::error::{Error, Result};
use crate::grid::{intersect_masks, PixelGrid};
use crate::linalg::lstsq;
use crate::prior::{IlluminationPrior, LightingParams};

pub type Normal = Vector3<f64>;
pub type ShRotation = SMatrix<f64, 9, 9>;

/// Allowed deviation from unit length for normals passed to [`sh_basis`].
pub const UNIT_TOL: f64 = 1e-6;

/// Albedo below this is considered unreliable when dividing it out.
pub const ALBEDO_EPS: f64 = 1e-4;

/// Coefficient weights turning the basis into an orthogonal one with equal
/// norms per band (up to a per-band constant).
const BAND_WEIGHTS: [f64; 9] = [
    1.0,
    1.0,
    1.0,
    1.0,
    3.464_101_615_137_754_6, // 2√3
    1.0,
    1.0,
    1.0,
    2.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShBasis(pub [f64; 9]);

impl ShBasis {
    pub fn as_vector(&self) -> SVector<f64, 9> {
        SVector::from(self.0)
    }
}

pub fn sh_basis(n: &Normal) -> Result<ShBasis> {
    let len = n.norm();
    if !((len - 1.0).abs() <= UNIT_TOL) {
        return Err(Error::Domain(format!("normal must be unit length, |n| = {len}")));
    }
    Ok(basis(n))
}

/// Basis without the unit-length check.
pub(crate) fn basis(n: &Normal) -> ShBasis {
    let (x, y, z) = (n.x, n.y, n.z);
    ShBasis([1.0, x, y, z, 3.0 * z * z - 1.0, x * y, x * z, y * z, x * x - y * y])
}

/// d b / d n as a 9×3 matrix.
pub(crate) fn basis_jacobian(n: &Normal) -> SMatrix<f64, 9, 3> {
    let (x, y, z) = (n.x, n.y, n.z);
    #[rustfmt::skip]
    let j = SMatrix::<f64, 9, 3>::from_row_slice(&[
        0.0, 0.0, 0.0,
        1.0, 0.0, 0.0,
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 0.0, 6.0 * z,
        y, x, 0.0,
        z, 0.0, x,
        0.0, z, y,
        2.0 * x, -2.0 * y, 0.0,
    ]);
    j
}

/// RGB spherical-harmonic illumination, rows R, G, B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShLighting {
    #[serde(rename = "L")]
    pub coeffs: [[f64; 9]; 3],
}

impl Default for ShLighting {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ShLighting {
    pub fn zeros() -> Self {
        Self { coeffs: [[0.0; 9]; 3] }
    }

    /// Uniform white light of intensity `c` (only the constant term).
    pub fn ambient(c: f64) -> Self {
        let mut l = Self::zeros();
        for row in &mut l.coeffs {
            row[0] = c;
        }
        l
    }

    /// Row-major flattening: R coefficients, then G, then B.
    pub fn to_vec27(&self) -> [f64; 27] {
        let mut v = [0.0; 27];
        for c in 0..3 {
            v[c * 9..c * 9 + 9].copy_from_slice(&self.coeffs[c]);
        }
        v
    }

    pub fn from_slice27(v: &[f64]) -> Result<Self> {
        if v.len() != 27 {
            return Err(Error::Domain(format!("lighting needs 27 coefficients, got {}", v.len())));
        }
        let mut l = Self::zeros();
        for c in 0..3 {
            l.coeffs[c].copy_from_slice(&v[c * 9..c * 9 + 9]);
        }
        Ok(l)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.to_vec27().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec27().iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut l = *self;
        l.coeffs.iter_mut().flatten().for_each(|v| *v *= s);
        l
    }

    pub fn add(&self, o: &ShLighting) -> Self {
        let mut l = *self;
        for c in 0..3 {
            for k in 0..9 {
                l.coeffs[c][k] += o.coeffs[c][k];
            }
        }
        l
    }

    /// Per-channel shading `L · b`.
    pub fn shade(&self, b: &ShBasis) -> Rgb {
        let dot = |row: &[f64; 9]| row.iter().zip(&b.0).map(|(l, b)| l * b).sum::<f64>();
        Rgb::new(dot(&self.coeffs[0]), dot(&self.coeffs[1]), dot(&self.coeffs[2]))
    }

    /// Applies a basis operator: each row becomes `row · M`.
    pub fn transformed(&self, m: &ShRotation) -> Self {
        let mut out = Self::zeros();
        for c in 0..3 {
            let row = SVector::<f64, 9>::from(self.coeffs[c]);
            let r = m.transpose() * row;
            out.coeffs[c].copy_from_slice(r.as_slice());
        }
        out
    }

    /// The environment turned by `rot`: shading at `n` equals the original
    /// shading at `rotᵀ·n`.
    pub fn rotated(&self, rot: &Matrix3<f64>) -> Result<Self> {
        Ok(self.transformed(&sh_rotation(&rot.transpose())?))
    }

    /// Norms of bands 0, 1 and 2 per channel, measured with weights that make
    /// the basis orthogonal so they are invariant under rotation.
    pub fn band_norms(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for c in 0..3 {
            let w = |k: usize| (self.coeffs[c][k] * BAND_WEIGHTS[k]).powi(2);
            out[c][0] = w(0).sqrt();
            out[c][1] = (1..4).map(w).sum::<f64>().sqrt();
            out[c][2] = (4..9).map(w).sum::<f64>().sqrt();
        }
        out
    }
}

/// Coefficients of the shading function `c + g·n + nᵀQn` (Q symmetric).
pub fn sh_from_quadratic(c: f64, g: &Vector3<f64>, q: &Matrix3<f64>) -> [f64; 9] {
    let q = (q + q.transpose()) * 0.5;
    let (qxx, qyy, qzz) = (q[(0, 0)], q[(1, 1)], q[(2, 2)]);
    [
        c + (qxx + qyy + qzz) / 3.0,
        g.x,
        g.y,
        g.z,
        (qzz - 0.5 * (qxx + qyy)) / 3.0,
        2.0 * q[(0, 1)],
        2.0 * q[(0, 2)],
        2.0 * q[(1, 2)],
        0.5 * (qxx - qyy),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel {
    pub rgb: Rgb,
    /// Shading was negative in at least one channel and was clamped to zero.
    pub clamped: bool,
}

/// `diag(albedo) · L · b(n)` before clamping.
pub fn render_pixel_unclamped(n: &Normal, albedo: Rgb, l: &ShLighting) -> Rgb {
    albedo * l.shade(&basis(n))
}

pub fn render_pixel(n: &Normal, albedo: Rgb, l: &ShLighting) -> Result<RenderedPixel> {
    if albedo.min_channel() < 0.0 {
        return Err(Error::Domain(format!("albedo must be non-negative, got {albedo:?}")));
    }
    let lin = albedo * l.shade(&sh_basis(n)?);
    let clamped = lin.min_channel() < 0.0;
    Ok(RenderedPixel {
        rgb: lin.map(|v| v.max(0.0)),
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: PixelGrid<Rgb>,
    pub clamped_pixels: usize,
}

/// Renders every pixel valid in both maps. With `gamma = Some(γ)` the output is
/// display-encoded as `i^(1/γ)`.
pub fn render_image(
    normals: &PixelGrid<Normal>,
    albedo: &PixelGrid<Rgb>,
    l: &ShLighting,
    gamma: Option<f64>,
) -> Result<RenderedImage> {
    normals.ensure_same_dims(albedo)?;
    let mask = intersect_masks(&[normals.mask(), albedo.mask()]);
    let pixels: Vec<Result<Option<RenderedPixel>>> = (0..normals.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return Ok(None);
            }
            render_pixel(&normals.value(i), albedo.value(i), l).map(Some)
        })
        .collect();
    let (w, h) = normals.dims();
    let mut image = PixelGrid::invalid(w, h);
    let mut clamped_pixels = 0;
    for (i, p) in pixels.into_iter().enumerate() {
        if let Some(p) = p? {
            clamped_pixels += p.clamped as usize;
            let v = match gamma {
                Some(g) => p.rgb.map(|c| c.powf(1.0 / g)),
                None => p.rgb,
            };
            image.set(i, v);
        }
    }
    Ok(RenderedImage {
        image,
        clamped_pixels,
    })
}

/// Re-renders estimated geometry and albedo under new lighting, gamma-encoded.
pub fn relight(normals: &PixelGrid<Normal>, albedo: &PixelGrid<Rgb>, l: &ShLighting) -> Result<RenderedImage> {
    render_image(normals, albedo, l, Some(GAMMA))
}

#[derive(Debug, Clone)]
pub struct LightingSolve {
    pub lighting: ShLighting,
    /// Subspace coordinates when solved through a prior.
    pub params: Option<LightingParams>,
    pub rank: usize,
    pub condition_number: f64,
    pub used_pixels: usize,
    /// Valid pixels dropped because their albedo was below [`ALBEDO_EPS`].
    pub excluded_pixels: usize,
}

struct ShadingSamples {
    basis: Vec<ShBasis>,
    shading: Vec<Rgb>,
    excluded: usize,
}

fn shading_samples(
    image: &PixelGrid<Rgb>,
    albedo: &PixelGrid<Rgb>,
    normals: &PixelGrid<Normal>,
) -> Result<ShadingSamples> {
    image.ensure_same_dims(albedo)?;
    image.ensure_same_dims(normals)?;
    let mask = intersect_masks(&[image.mask(), albedo.mask(), normals.mask()]);
    let mut out = ShadingSamples {
        basis: Vec::new(),
        shading: Vec::new(),
        excluded: 0,
    };
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let a = albedo.value(i);
        if a.min_channel() < ALBEDO_EPS {
            out.excluded += 1;
            continue;
        }
        out.basis.push(basis(&normals.value(i)));
        out.shading.push(image.value(i).zip(a, |v, a| v / a));
    }
    if out.basis.len() < 9 {
        return Err(Error::InsufficientData(format!(
            "lighting solve needs at least 9 usable pixels, got {}",
            out.basis.len()
        )));
    }
    Ok(out)
}

/// Least-squares lighting from a linear image, albedo and normals, i.e.
/// `L = (I ⊘ A) · B(N)⁺`. With a prior the solve runs over its subspace
/// coordinates instead of the 27 free coefficients.
pub fn solve_lighting(
    image: &PixelGrid<Rgb>,
    albedo: &PixelGrid<Rgb>,
    normals: &PixelGrid<Normal>,
    prior: Option<&IlluminationPrior>,
) -> Result<LightingSolve> {
    let s = shading_samples(image, albedo, normals)?;
    match prior {
        None => solve_full(s),
        Some(p) => solve_subspace(s, p),
    }
}

fn solve_full(s: ShadingSamples) -> Result<LightingSolve> {
    let k = s.basis.len();
    let b = DMatrix::from_fn(k, 9, |r, c| s.basis[r].0[c]);
    let y = DMatrix::from_fn(k, 3, |r, c| s.shading[r].to_array()[c]);
    // one factorisation, three channel right-hand sides
    let ls = lstsq(b, &y);
    let mut lighting = ShLighting::zeros();
    for c in 0..3 {
        for j in 0..9 {
            lighting.coeffs[c][j] = ls.solution[(j, c)];
        }
    }
    Ok(LightingSolve {
        lighting,
        params: None,
        rank: ls.rank,
        condition_number: ls.condition_number,
        used_pixels: k,
        excluded_pixels: s.excluded,
    })
}

fn solve_subspace(s: ShadingSamples, prior: &IlluminationPrior) -> Result<LightingSolve> {
    let k = s.basis.len();
    let d = prior.dim();
    let basis_mat = prior.scaled_components();
    let mean = prior.mean_lighting();
    let mut a = DMatrix::zeros(3 * k, d);
    let mut y = DMatrix::zeros(3 * k, 1);
    for (p, (b, sh)) in s.basis.iter().zip(&s.shading).enumerate() {
        let mean_shade = mean.shade(b).to_array();
        let target = sh.to_array();
        for c in 0..3 {
            let row = 3 * p + c;
            y[(row, 0)] = target[c] - mean_shade[c];
            for j in 0..d {
                let mut acc = 0.0;
                for (q, bq) in b.0.iter().enumerate() {
                    acc += basis_mat[(c * 9 + q, j)] * bq;
                }
                a[(row, j)] = acc;
            }
        }
    }
    let ls = lstsq(a, &y);
    let params = LightingParams::new(ls.solution.column(0).iter().cloned().collect());
    let lighting = prior.decode(&params)?;
    Ok(LightingSolve {
        lighting,
        params: Some(params),
        rank: ls.rank,
        condition_number: ls.condition_number,
        used_pixels: k,
        excluded_pixels: s.excluded,
    })
}

/// `n` points spread evenly over the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Normal> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Normal::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

const ROTATION_SAMPLES: usize = 100;

/// The 9×9 operator `M` with `b(rot·n) = M·b(n)` for every unit `n`.
///
/// Fitted by least squares on a fixed set of directions; the relation is
/// exact because rotations keep each band inside itself.
pub fn sh_rotation(rot: &Matrix3<f64>) -> Result<ShRotation> {
    if !rot.iter().all(|v| v.is_finite())
        || (rot.transpose() * rot - Matrix3::identity()).norm() >= 1e-9
        || rot.determinant() <= 0.0
    {
        return Err(Error::Domain("sh_rotation needs a proper rotation matrix".into()));
    }
    let dirs = fibonacci_sphere(ROTATION_SAMPLES);
    let b = DMatrix::from_fn(dirs.len(), 9, |r, c| basis(&dirs[r]).0[c]);
    let b_rot = DMatrix::from_fn(dirs.len(), 9, |r, c| basis(&(rot * dirs[r])).0[c]);
    let ls = lstsq(b, &b_rot);
    let mt = ls.solution;
    let mut m = ShRotation::from_fn(|i, j| mt[(j, i)]);
    // bands never mix; drop round-off outside the 1+3+5 blocks
    for i in 0..9 {
        for j in 0..9 {
            if band_of(i) != band_of(j) {
                m[(i, j)] = 0.0;
            }
        }
    }
    Ok(m)
}

fn band_of(k: usize) -> usize {
    match k {
        0 => 0,
        1..=3 => 1,
        _ => 2,
    }
}
