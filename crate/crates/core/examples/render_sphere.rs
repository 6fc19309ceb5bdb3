//! Shades a textured sphere with spherical-harmonic lighting, then relights
//! the same albedo and normals under a second environment.
//!
//! cargo run --release --example render_sphere -- [out-dir]

use std::path::PathBuf;

use irlab::sh::{relight, render_image};
use irlab::synth::{natural_environments, SphereScene};

fn main() -> irlab::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render-out".into()));
    std::fs::create_dir_all(&out)?;
    let scene = SphereScene::new(3);
    let envs = natural_environments(2, 5);
    let view = scene.render(&scene.front_camera(128)?, 128, 128, &envs[0])?;
    irlab::io::write_png(&out.join("photo.png"), &view.image)?;

    let shading_only = render_image(&view.normals, &view.albedo.map(|_| irlab::color::Rgb::splat(1.0)), &envs[0], Some(2.2))?;
    irlab::io::write_png(&out.join("shading.png"), &shading_only.image)?;

    let relit = relight(&view.normals, &view.albedo, &envs[1])?;
    irlab::io::write_png(&out.join("relit.png"), &relit.image)?;
    println!(
        "{} pixels rendered, {} clamped after relighting; images in {}",
        view.image.valid_count(),
        relit.clamped_pixels,
        out.display()
    );
    Ok(())
}
