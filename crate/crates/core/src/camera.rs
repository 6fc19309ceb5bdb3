//! Pinhole camera with world→camera pose.

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Intrinsics `(f, cx, cy)` and extrinsics mapping world points `X` to camera
/// coordinates `R·X + t`. Image x grows right, y grows down, z is the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct Camera {
    f: f64,
    cx: f64,
    cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(f: f64, cx: f64, cy: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal length must be positive, got {f}")));
        }
        if !cx.is_finite() || !cy.is_finite() || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite camera parameter".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            f,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Identity pose.
    pub fn looking_forward(f: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(f, cx, cy, Matrix3::identity(), Vector3::zeros())
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-frame point for pixel `(x, y)` at depth `w` along the optical axis.
    pub fn backproject(&self, x: f64, y: f64, w: f64) -> Vector3<f64> {
        Vector3::new(w * (x - self.cx) / self.f, w * (y - self.cy) / self.f, w)
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Point2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.f * p.x / p.z + self.cx,
            self.f * p.y / p.z + self.cy,
        ))
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCamera("rotation has non-finite entries".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    if err >= ORTHONORMAL_TOL {
        return Err(Error::InvalidCamera(format!("rotation is not orthonormal (|RᵀR - I| = {err:e})")));
    }
    if r.determinant() <= 0.0 {
        return Err(Error::InvalidCamera("rotation has negative determinant".into()));
    }
    Ok(())
}

/// On-disk JSON layout: `{"f", "cx", "cy", "R": [9, row-major], "t": [3]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFile {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(c: CameraFile) -> Result<Self> {
        let rot = Matrix3::from_row_slice(&c.r);
        Camera::new(c.f, c.cx, c.cy, rot, Vector3::from(c.t))
    }
}

impl From<Camera> for CameraFile {
    fn from(c: Camera) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = c.rotation[(i, j)];
            }
        }
        CameraFile {
            f: c.f,
            cx: c.cx,
            cy: c.cy,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

/// Rotation about the camera x axis.
pub fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about the camera y axis.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the camera z axis.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
