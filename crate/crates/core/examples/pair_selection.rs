//! Photographs one sphere from a ring of cameras under changing light and
//! picks the view pairs suited to joint solving.
//!
//! cargo run --release --example pair_selection

use irlab::geometry::{select_pairs, PairThresholds, PosedImage};
use irlab::synth::{natural_environments, SphereScene};

fn main() -> irlab::Result<()> {
    let scene = SphereScene::new(8);
    let lights = natural_environments(3, 2);
    let yaws = [0.0f64, 10.0, 20.0, 90.0, 180.0];
    let mut views = Vec::new();
    for (k, yaw) in yaws.iter().enumerate() {
        // every other view keeps the same lighting, so some pairs show no change
        let l = &lights[k % 2];
        let v = scene.render(&scene.orbit_camera(64, yaw.to_radians())?, 64, 64, l)?;
        views.push(PosedImage {
            image: v.image,
            depth: v.depth,
        });
    }
    let sel = select_pairs(&views, &PairThresholds::default())?;
    println!("median depth {:.2}", sel.thresholds.median_depth);
    for r in &sel.reports {
        let verdict = match r.rejected {
            None => "selected".to_string(),
            Some(why) => format!("rejected: {why:?}"),
        };
        println!(
            "{:>5.0} deg vs {:>5.0} deg  camera distance {:.2}  overlap {}  {verdict}",
            yaws[r.i],
            yaws[r.j],
            r.camera_distance,
            r.overlap.map_or("-".into(), |o| format!("{o:.2}"))
        );
    }
    println!("{} pairs selected", sel.pairs.len());
    Ok(())
}
