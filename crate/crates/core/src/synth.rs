//! Synthetic scenes with known albedo, normals, lighting and depth: natural
//! looking SH environments and a patch-textured sphere seen by one or two
//! cameras.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{rotation_y, Camera};
use crate::color::{gamma_encode, Rgb};
use crate::error::{Error, Result};
use crate::geometry::PosedDepth;
use crate::grid::PixelGrid;
use crate::io;
use crate::prior::{IlluminationPrior, LightingParams};
use crate::sh::{fibonacci_sphere, render_image, sh_from_quadratic, Normal, ShLighting};

/// Upward direction in camera coordinates (the image y axis points down).
pub const UP: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);

/// SH coefficients of a lobe of colour `color` approximating
/// `max(0, d·n)`, plus a sky/ground gradient and ambient term.
fn lobe(d: &Vector3<f64>, weight: f64) -> [f64; 9] {
    // max(0, x) ≈ 1/4 + x/2 + (5/32)(3x² − 1)
    sh_from_quadratic(
        weight * (0.25 - 5.0 / 32.0),
        &(d * (weight * 0.5)),
        &(d * d.transpose() * (weight * 15.0 / 32.0)),
    )
}

/// A random outdoor-like environment: a sun in the upper hemisphere, a sky
/// dome brighter above than below and a coloured ambient term.
pub fn natural_environment(rng: &mut impl Rng) -> ShLighting {
    let elevation: f64 = rng.gen_range(0.1..1.3);
    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let sun = Vector3::new(elevation.cos() * azimuth.cos(), 0.0, elevation.cos() * azimuth.sin()) + UP * elevation.sin();
    let sun_strength = rng.gen_range(0.2..1.0);
    let warm = rng.gen_range(0.0..0.25);
    let sun_color = [1.0 + warm, 1.0, 1.0 - warm];
    let sky_strength = rng.gen_range(0.2..0.6);
    let sky_color = [0.75, 0.85, 1.0];
    let ambient = rng.gen_range(0.15..0.35);
    let mut l = ShLighting::zeros();
    for c in 0..3 {
        let s = lobe(&sun, sun_strength * sun_color[c]);
        let sky = sh_from_quadratic(sky_strength * sky_color[c] * 0.5, &(UP * (sky_strength * sky_color[c] * 0.5)), &Matrix3::zeros());
        for k in 0..9 {
            l.coeffs[c][k] = s[k] + sky[k];
        }
        l.coeffs[c][0] += ambient;
    }
    l
}

pub fn natural_environments(count: usize, seed: u64) -> Vec<ShLighting> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| natural_environment(&mut rng)).collect()
}

/// Lowest shading value of any channel over unit directions.
pub fn min_shading(l: &ShLighting) -> f64 {
    fibonacci_sphere(400)
        .iter()
        .map(|n| l.shade(&crate::sh::basis(n)).min_channel())
        .fold(f64::INFINITY, f64::min)
}

/// Draws prior coordinates from a standard normal scaled by `spread`,
/// rejecting lightings whose shading dips below `min_level` anywhere.
pub fn sample_prior_lighting(prior: &IlluminationPrior, rng: &mut impl Rng, spread: f64, min_level: f64) -> Result<ShLighting> {
    for _ in 0..1000 {
        let alpha: Vec<f64> = (0..prior.dim()).map(|_| spread * standard_normal(rng)).collect();
        let l = prior.decode(&LightingParams::new(alpha))?;
        if min_shading(&l) >= min_level {
            return Ok(l);
        }
    }
    Err(Error::Domain("prior lighting samples keep producing dark shading".into()))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Width of the blend between neighbouring patches, relative to the radius.
pub const PATCH_EDGE: f64 = 0.05;

/// A sphere whose albedo is constant on patches cut by three planes through
/// its centre, blended smoothly across the cuts.
#[derive(Debug, Clone)]
pub struct SphereScene {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub axes: [Vector3<f64>; 3],
    pub palette: [Rgb; 8],
}

impl SphereScene {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut axis = || {
            Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize()
        };
        let axes = [axis(), axis(), axis()];
        let palette = std::array::from_fn(|_| {
            Rgb::new(rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9))
        });
        Self {
            center: Vector3::new(0.0, 0.0, 4.0),
            radius: 1.0,
            axes,
            palette,
        }
    }

    pub fn albedo_at(&self, world: &Vector3<f64>) -> Rgb {
        let d = world - self.center;
        let side: Vec<f64> = self
            .axes
            .iter()
            .map(|a| 1.0 / (1.0 + (-d.dot(a) / (PATCH_EDGE * self.radius)).exp()))
            .collect();
        let mut out = Rgb::default();
        for (idx, c) in self.palette.iter().enumerate() {
            let w: f64 = (0..3).map(|k| if idx >> k & 1 == 1 { side[k] } else { 1.0 - side[k] }).product();
            out = out + *c * w;
        }
        out
    }

    /// Nearest hit along the ray through pixel `(x, y)`, in world coordinates.
    fn hit(&self, camera: &Camera, x: f64, y: f64) -> Option<(f64, Vector3<f64>)> {
        let origin = camera.center();
        let dir_cam = camera.backproject(x, y, 1.0);
        let dir = camera.rotation().transpose() * dir_cam;
        let oc = origin - self.center;
        let a = dir.norm_squared();
        let b = 2.0 * dir.dot(&oc);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        // depth along the optical axis is t because dir_cam has z = 1
        (t > 0.0).then(|| (t, origin + dir * t))
    }

    /// Renders the sphere from `camera` under `lighting` (camera frame).
    pub fn render(&self, camera: &Camera, width: usize, height: usize, lighting: &ShLighting) -> Result<SyntheticView> {
        let mut depth = PixelGrid::invalid(width, height);
        let mut albedo = PixelGrid::invalid(width, height);
        let mut normals = PixelGrid::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some((w, p)) = self.hit(camera, x as f64, y as f64) {
                    let i = y * width + x;
                    depth.set(i, w);
                    albedo.set(i, self.albedo_at(&p));
                    // facing the camera: the negated outward normal
                    let n: Normal = camera.rotation() * ((self.center - p) / self.radius);
                    normals.set(i, n);
                }
            }
        }
        let linear = render_image(&normals, &albedo, lighting, None)?;
        if linear.clamped_pixels > 0 {
            return Err(Error::Domain(format!(
                "lighting gives negative shading on {} pixels",
                linear.clamped_pixels
            )));
        }
        let mut image = PixelGrid::invalid(width, height);
        for i in linear.image.valid_indices() {
            image.set(i, gamma_encode(linear.image.value(i))?);
        }
        Ok(SyntheticView {
            image,
            linear: linear.image,
            depth: PosedDepth::new(depth, camera.clone())?,
            albedo,
            normals,
            lighting: lighting.clone(),
        })
    }

    /// Front camera for a `size`×`size` image, framing the sphere tightly.
    pub fn front_camera(&self, size: usize) -> Result<Camera> {
        let s = size as f64;
        Camera::looking_forward(1.6 * s, (s - 1.0) / 2.0, (s - 1.0) / 2.0)
    }

    /// The front camera orbited about the sphere centre by `yaw` radians.
    pub fn orbit_camera(&self, size: usize, yaw: f64) -> Result<Camera> {
        let front = self.front_camera(size)?;
        let orbit = rotation_y(yaw);
        let rotation = orbit.transpose();
        let center = self.center - orbit * self.center;
        Camera::new(front.f(), front.cx(), front.cy(), rotation, -(rotation * center))
    }
}

/// One rendered view with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticView {
    /// Display-encoded photograph.
    pub image: PixelGrid<Rgb>,
    pub linear: PixelGrid<Rgb>,
    pub depth: PosedDepth,
    pub albedo: PixelGrid<Rgb>,
    /// Camera-frame normals.
    pub normals: PixelGrid<Normal>,
    pub lighting: ShLighting,
}

/// Largest shading value of any channel over unit directions.
pub fn max_shading(l: &ShLighting) -> f64 {
    fibonacci_sphere(400)
        .iter()
        .map(|n| l.shade(&crate::sh::basis(n)).to_array().into_iter().fold(f64::MIN, f64::max))
        .fold(f64::MIN, f64::max)
}

/// Spread of the prior coordinates drawn for fixture lighting.
pub const FIXTURE_SPREAD: f64 = 1.0;

/// Darkens `scene`'s palette so no rendered pixel under any of `lightings`
/// exceeds `peak`.
fn fit_exposure(scene: &mut SphereScene, lightings: &[&ShLighting], peak: f64) {
    let albedo_max = scene
        .palette
        .iter()
        .map(|c| c.to_array().into_iter().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let shade_max = lightings.iter().map(|l| max_shading(l)).fold(0.0, f64::max);
    let k = (peak / (albedo_max * shade_max)).min(1.0);
    for c in scene.palette.iter_mut() {
        *c = *c * k;
    }
}

/// Sphere seen from the front under a lighting drawn from `prior`.
pub fn sphere_fixture(size: usize, seed: u64, prior: &IlluminationPrior) -> Result<SyntheticView> {
    let mut scene = SphereScene::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let lighting = sample_prior_lighting(prior, &mut rng, FIXTURE_SPREAD, 0.1)?;
    fit_exposure(&mut scene, &[&lighting], 0.95);
    scene.render(&scene.front_camera(size)?, size, size, &lighting)
}

/// Yaw between the two cameras of [`two_view_fixture`].
pub const PAIR_YAW: f64 = 30.0 * std::f64::consts::PI / 180.0;

/// The same sphere from two cameras `PAIR_YAW` apart, each under its own
/// lighting drawn from `prior`.
pub fn two_view_fixture(size: usize, seed: u64, prior: &IlluminationPrior) -> Result<[SyntheticView; 2]> {
    let mut scene = SphereScene::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1d);
    let la = sample_prior_lighting(prior, &mut rng, FIXTURE_SPREAD, 0.1)?;
    let lb = sample_prior_lighting(prior, &mut rng, FIXTURE_SPREAD, 0.1)?;
    fit_exposure(&mut scene, &[&la, &lb], 0.95);
    Ok([
        scene.render(&scene.front_camera(size)?, size, size, &la)?,
        scene.render(&scene.orbit_camera(size, PAIR_YAW)?, size, size, &lb)?,
    ])
}

/// Prior fitted to augmented synthetic environments, as used by the fixtures.
pub fn synthetic_prior(environments: usize, dim: usize, seed: u64) -> Result<IlluminationPrior> {
    crate::prior::build_prior(&natural_environments(environments, seed), dim, true)
}

pub const TRUTH_ALBEDO: &str = "albedo.pfm";
pub const TRUTH_NORMALS: &str = "normals.pfm";
pub const TRUTH_LIGHTING: &str = "lighting.json";

/// Writes `dir/scene/<id>/…` for every view plus `dir/truth/<id>/` holding
/// the true albedo, normals and lighting.
pub fn write_fixture(dir: &Path, views: &[(&str, &SyntheticView)]) -> Result<()> {
    for (id, v) in views {
        io::write_view(&dir.join("scene").join(id), &v.image, &v.depth, None)?;
        let truth = dir.join("truth").join(id);
        std::fs::create_dir_all(&truth)?;
        io::write_rgb_pfm(&truth.join(TRUTH_ALBEDO), &v.albedo)?;
        io::write_normals(&truth.join(TRUTH_NORMALS), &v.normals)?;
        io::write_json(&truth.join(TRUTH_LIGHTING), &v.lighting)?;
    }
    Ok(())
}
