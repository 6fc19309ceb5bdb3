//! Warps one view of the two-view sphere into the other and back, reporting
//! coverage and the round-trip pixel drift.
//!
//! cargo run --release --example cross_projection -- [out-dir]

use std::path::PathBuf;

use irlab::color::Rgb;
use irlab::geometry::Warp;
use irlab::grid::PixelGrid;
use irlab::synth::{synthetic_prior, two_view_fixture};

fn main() -> irlab::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cross-out".into()));
    std::fs::create_dir_all(&out)?;
    let prior = synthetic_prior(79, 18, 1)?;
    let [a, b] = two_view_fixture(96, 11, &prior)?;
    let dims = a.image.dims();
    let b_into_a = Warp::new(&a.depth, b.depth.camera(), b.image.dims());
    let a_into_b = Warp::new(&b.depth, a.depth.camera(), dims);

    let warped = b_into_a.apply(&b.image)?;
    irlab::io::write_png(&out.join("a.png"), &a.image)?;
    irlab::io::write_png(&out.join("b_in_a.png"), &warped)?;
    println!("{} of {} pixels of A see B", warped.valid_count(), a.image.valid_count());

    // pixel coordinates of A carried to B and back
    let coords = PixelGrid::from_fn(dims.0, dims.1, |x, y| Some(Rgb::new(x as f64, y as f64, 0.0)));
    let there = a_into_b.apply(&coords.restrict(a.image.mask())?)?;
    let back = b_into_a.apply(&there)?;
    let mut drift: Vec<f64> = back
        .valid_indices()
        .map(|i| {
            let p = back.value(i);
            ((p.r - (i % dims.0) as f64).powi(2) + (p.g - (i / dims.0) as f64).powi(2)).sqrt()
        })
        .collect();
    drift.sort_by(f64::total_cmp);
    println!(
        "round trip A -> B -> A: median drift {:.3} px over {} pixels",
        drift[drift.len() / 2],
        drift.len()
    );
    Ok(())
}
