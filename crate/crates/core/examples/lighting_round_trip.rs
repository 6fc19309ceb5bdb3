//! Renders random scenes and recovers their lighting by least squares, both
//! over all 27 coefficients and inside an 18-dimensional prior subspace.
//!
//! cargo run --release --example lighting_round_trip

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irlab::color::Rgb;
use irlab::grid::PixelGrid;
use irlab::sh::{fibonacci_sphere, render_image, solve_lighting};
use irlab::synth::{sample_prior_lighting, synthetic_prior};

fn relative_error(a: &irlab::sh::ShLighting, b: &irlab::sh::ShLighting) -> f64 {
    let d: f64 = a.to_vec27().iter().zip(b.to_vec27()).map(|(x, y)| (x - y).powi(2)).sum();
    d.sqrt() / b.frobenius_norm()
}

fn main() -> irlab::Result<()> {
    let prior = synthetic_prior(79, 18, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normals = fibonacci_sphere(1024);
    let normals = PixelGrid::from_vec(32, 32, normals)?;
    let (mut worst_full, mut worst_prior) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let truth = sample_prior_lighting(&prior, &mut rng, 1.0, 0.05)?;
        let albedo = normals.map(|_| Rgb::new(rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)));
        let image = render_image(&normals, &albedo, &truth, None)?.image;
        let full = solve_lighting(&image, &albedo, &normals, None)?;
        let sub = solve_lighting(&image, &albedo, &normals, Some(&prior))?;
        worst_full = worst_full.max(relative_error(&full.lighting, &truth));
        worst_prior = worst_prior.max(relative_error(&sub.lighting, &truth));
    }
    println!("worst relative error over 20 scenes: full {worst_full:.2e}, prior subspace {worst_prior:.2e}");
    Ok(())
}
