//! Scores a degraded albedo against a reference with the scale-invariant
//! error measures, and normals with angular error.
//!
//! cargo run --release --example image_metrics

use irlab::color::Rgb;
use irlab::metrics::{albedo_scores, angular_error_stats};
use irlab::sh::ShLighting;
use irlab::synth::SphereScene;

fn main() -> irlab::Result<()> {
    let scene = SphereScene::new(4);
    let view = scene.render(&scene.front_camera(96)?, 96, 96, &ShLighting::ambient(0.6))?;
    let truth = &view.albedo;

    let cases: [(&str, Box<dyn Fn(usize, Rgb) -> Rgb>); 4] = [
        ("identical", Box::new(|_, c| c)),
        ("global scale 0.5", Box::new(|_, c| c * 0.5)),
        ("left/right gain", Box::new(|i, c| c * if i % 96 < 48 { 0.6 } else { 1.4 })),
        ("flattened", Box::new(|_, _| Rgb::splat(0.5))),
    ];
    println!("{:<18} {:>10} {:>10} {:>8}", "estimate", "mse", "lmse", "dssim");
    for (name, f) in cases {
        let mut est = truth.clone();
        for i in truth.valid_indices() {
            est.set(i, f(i, truth.value(i)));
        }
        let s = albedo_scores(&est, truth)?;
        println!("{name:<18} {:>10.2e} {:>10.2e} {:>8.4}", s.mse, s.lmse, s.dssim);
    }

    let tilted = view.normals.map(|n| (irlab::camera::rotation_y(0.1) * n).normalize());
    let a = angular_error_stats(&tilted, &view.normals)?;
    println!("normals tilted by 0.1 rad: mean {:.3} deg, median {:.3} deg", a.mean_deg, a.median_deg);
    Ok(())
}
