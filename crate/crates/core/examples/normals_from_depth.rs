//! Differentiates rendered sphere depth into normals at growing resolutions
//! and reports the interior angular error against the analytic normals.
//!
//! cargo run --release --example normals_from_depth

use irlab::geometry::normals_from_depth;
use irlab::metrics::angular_error_stats;
use irlab::sh::ShLighting;
use irlab::synth::SphereScene;

fn main() -> irlab::Result<()> {
    let scene = SphereScene::new(1);
    let mut last: Option<f64> = None;
    for size in [64, 128, 256] {
        let view = scene.render(&scene.front_camera(size)?, size, size, &ShLighting::ambient(0.5))?;
        let est = normals_from_depth(&view.depth);
        // keep pixels whose 3-neighbourhood lies on the sphere
        let interior = est.restrict(
            &(0..est.len())
                .map(|i| {
                    let (x, y) = (i % size, i / size);
                    x >= 3 && y >= 3 && x + 3 < size && y + 3 < size && {
                        let probe = |dx: isize, dy: isize| {
                            view.depth.depth().get((x as isize + dx) as usize, (y as isize + dy) as usize).is_some()
                        };
                        probe(-3, 0) && probe(3, 0) && probe(0, -3) && probe(0, 3)
                    }
                })
                .collect::<Vec<_>>(),
        )?;
        let stats = angular_error_stats(&interior, &view.normals)?;
        let ratio = last.map(|l| format!("  ratio {:.2}", l / stats.mean_deg)).unwrap_or_default();
        println!("{size:>4}px: mean {:.4} deg, median {:.4} deg{ratio}", stats.mean_deg, stats.median_deg);
        last = Some(stats.mean_deg);
    }
    Ok(())
}
