//! RGB values, camera gamma and CIELAB conversion.
//!
//! LAB is computed from sRGB primaries with a D65 white point. The white is
//! taken as the row sums of the RGB→XYZ matrix so that neutral inputs map to
//! `a = b = 0` exactly.

use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera gamma applied to linear renderings.
pub const GAMMA: f64 = 2.2;

/// Below this linear value the loss-side gamma curve continues linearly so
/// that unclamped (possibly negative) shading stays differentiable.
pub const GAMMA_KNEE: f64 = 1e-4;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

// (6/29)^3 and the slope of the linear segment of the LAB companding curve.
const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_SLOPE: f64 = 841.0 / 108.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Rgb {
    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub const fn splat(v: f64) -> Self {
        Self { r: v, g: v, b: v }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.r, self.g, self.b)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn map(self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::new(f(self.r), f(self.g), f(self.b))
    }

    pub fn zip(self, o: Rgb, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        Self::new(f(self.r, o.r), f(self.g, o.g), f(self.b, o.b))
    }

    pub fn min_channel(self) -> f64 {
        self.r.min(self.g).min(self.b)
    }

    pub fn sum(self) -> f64 {
        self.r + self.g + self.b
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a + b)
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        *self = *self + o;
    }
}

impl Sub for Rgb {
    type Output = Rgb;
    fn sub(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a - b)
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        self.map(|v| v * s)
    }
}

impl Mul for Rgb {
    type Output = Rgb;
    fn mul(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a * b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.l, self.a, self.b)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self {
            l: v.x,
            a: v.y,
            b: v.z,
        }
    }
}

/// Whether [`rgb_to_lab`] had to clamp its input into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gamut {
    Inside,
    Clamped,
}

fn check_non_negative(c: Rgb, what: &str) -> Result<()> {
    if c.min_channel() < 0.0 || !c.is_finite() {
        return Err(Error::Domain(format!("{what} requires finite non-negative channels, got {c:?}")));
    }
    Ok(())
}

pub fn gamma_encode(c: Rgb) -> Result<Rgb> {
    gamma_encode_with(c, GAMMA)
}

pub fn gamma_encode_with(c: Rgb, gamma: f64) -> Result<Rgb> {
    check_non_negative(c, "gamma_encode")?;
    Ok(c.map(|v| v.powf(1.0 / gamma)))
}

pub fn gamma_decode(c: Rgb) -> Result<Rgb> {
    gamma_decode_with(c, GAMMA)
}

pub fn gamma_decode_with(c: Rgb, gamma: f64) -> Result<Rgb> {
    check_non_negative(c, "gamma_decode")?;
    Ok(c.map(|v| v.powf(gamma)))
}

/// Gamma encoding used inside the losses: `x^(1/γ)` above [`GAMMA_KNEE`],
/// continued by its tangent below so negative shading is well defined.
/// Returns the value and its derivative.
pub fn gamma_encode_smooth(x: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / gamma;
    if x >= GAMMA_KNEE {
        let v = x.powf(p);
        (v, p * v / x)
    } else {
        let v0 = GAMMA_KNEE.powf(p);
        let d0 = p * v0 / GAMMA_KNEE;
        (v0 + (x - GAMMA_KNEE) * d0, d0)
    }
}

/// sRGB transfer curve (encoded → linear) with its derivative. The linear toe
/// extends to negative inputs and the power segment beyond one.
pub fn srgb_to_linear(c: f64) -> (f64, f64) {
    if c <= 0.04045 {
        (c / 12.92, 1.0 / 12.92)
    } else {
        let base = (c + 0.055) / 1.055;
        let v = base.powf(2.4);
        (v, 2.4 * v / base / 1.055)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> (f64, f64) {
    if t > LAB_EPSILON {
        let c = t.cbrt();
        (c, 1.0 / (3.0 * c * c))
    } else {
        (LAB_SLOPE * t + 4.0 / 29.0, LAB_SLOPE)
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (f - 4.0 / 29.0) / LAB_SLOPE
    }
}

fn xyz_matrix() -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| RGB_TO_XYZ[i][j])
}

/// LAB of a linear-light RGB triple and the 3×3 Jacobian d(L,a,b)/d(r,g,b).
/// No clamping; used for albedo terms and as the core of the encoded path.
pub fn linear_rgb_to_lab_jacobian(c: Rgb) -> (Lab, Matrix3<f64>) {
    let m = xyz_matrix();
    let xyz = m * c.to_vector();
    let (fx, dx) = lab_f(xyz.x / WHITE[0]);
    let (fy, dy) = lab_f(xyz.y / WHITE[1]);
    let (fz, dz) = lab_f(xyz.z / WHITE[2]);
    let lab = Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    };
    // d(f)/d(xyz) is diagonal
    let gx = dx / WHITE[0];
    let gy = dy / WHITE[1];
    let gz = dz / WHITE[2];
    let dlab_dxyz = Matrix3::new(
        0.0,
        116.0 * gy,
        0.0,
        500.0 * gx,
        -500.0 * gy,
        0.0,
        0.0,
        200.0 * gy,
        -200.0 * gz,
    );
    (lab, dlab_dxyz * m)
}

pub fn linear_rgb_to_lab(c: Rgb) -> Lab {
    linear_rgb_to_lab_jacobian(c).0
}

/// LAB of a display-encoded (sRGB) triple with its Jacobian, without clamping.
pub fn encoded_rgb_to_lab_jacobian(c: Rgb) -> (Lab, Matrix3<f64>) {
    let (r, dr) = srgb_to_linear(c.r);
    let (g, dg) = srgb_to_linear(c.g);
    let (b, db) = srgb_to_linear(c.b);
    let (lab, j) = linear_rgb_to_lab_jacobian(Rgb::new(r, g, b));
    (lab, j * Matrix3::from_diagonal(&Vector3::new(dr, dg, db)))
}

/// CIELAB of an encoded RGB value in `[0, 1]`. Out-of-range channels are
/// clamped and reported through [`Gamut::Clamped`].
pub fn rgb_to_lab(c: Rgb) -> (Lab, Gamut) {
    let clamped = c.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    let gamut = if clamped == c { Gamut::Inside } else { Gamut::Clamped };
    (encoded_rgb_to_lab_jacobian(clamped).0, gamut)
}

/// Inverse of [`rgb_to_lab`] for in-gamut colours.
pub fn lab_to_rgb(lab: Lab) -> Rgb {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = Vector3::new(
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    );
    let inv = xyz_matrix().try_inverse().expect("RGB->XYZ matrix is invertible");
    Rgb::from_vector(inv * xyz).map(linear_to_srgb)
}

/// (r, g) chromaticity; black maps to the neutral point.
pub fn chromaticity(c: Rgb) -> (f64, f64) {
    let s = c.sum();
    if s <= 1e-12 {
        (1.0 / 3.0, 1.0 / 3.0)
    } else {
        (c.r / s, c.g / s)
    }
}
