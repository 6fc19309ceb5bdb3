//! Decomposes a synthetic sphere photograph into albedo, normals and lighting
//! and scores the result against the known truth.
//!
//! cargo run --release --example decompose_sphere -- [size] [out-dir]

use std::path::PathBuf;
use std::time::Instant;

use irlab::losses::appearance_loss;
use irlab::metrics::{albedo_scores, angular_error_stats};
use irlab::sh::render_image;
use irlab::solver::{solve_single, SolveConfig, ViewInput};
use irlab::synth::{sphere_fixture, synthetic_prior};

fn main() -> irlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map_or(64, |s| s.parse().expect("size is an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "decompose-out".into()));
    std::fs::create_dir_all(&out)?;

    let prior = synthetic_prior(79, 18, 1)?;
    let view = sphere_fixture(size, 7, &prior)?;
    let input = ViewInput {
        image: &view.image,
        sky: None,
        guide: Some(&view.depth),
    };
    let start = Instant::now();
    let sol = solve_single(&input, &prior, &SolveConfig::default())?;
    let elapsed = start.elapsed();

    let albedo = sol.estimate.albedo();
    let normals = sol.estimate.normals();
    let rendered = render_image(&normals, &albedo, &sol.lighting, Some(2.2))?.image;
    let scores = albedo_scores(&albedo, &view.albedo)?;
    let angles = angular_error_stats(&normals, &view.normals)?;
    println!("solved {size}x{size} in {elapsed:.1?}");
    println!("appearance loss  {:.3e}", appearance_loss(&rendered, &view.image)?.value);
    println!("normal error     mean {:.2} deg, median {:.2} deg", angles.mean_deg, angles.median_deg);
    println!("albedo           mse {:.2e}, lmse {:.2e}, dssim {:.3}", scores.mse, scores.lmse, scores.dssim);

    irlab::io::write_png(&out.join("photo.png"), &view.image)?;
    irlab::io::write_png(&out.join("albedo.png"), &albedo.map(|c| c.map(|v| v.max(0.0).powf(1.0 / 2.2))))?;
    irlab::io::write_png(&out.join("normals.png"), &normals.map(|n| irlab::color::Rgb::new(0.5 + 0.5 * n.x, 0.5 + 0.5 * n.y, 0.5 + 0.5 * n.z)))?;
    irlab::io::write_atomic(&out.join("trace.csv"), sol.trace.to_csv().as_bytes())?;
    Ok(())
}
