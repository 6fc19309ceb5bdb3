//! Solves two views of one object under different lighting, once coupled by
//! albedo consistency and cross-rendering and once independently, and
//! compares how well the two albedo estimates agree.
//!
//! cargo run --release --example siamese_pair -- [size]

use irlab::color::Rgb;
use irlab::geometry::Warp;
use irlab::grid::PixelGrid;
use irlab::losses::albedo_consistency_loss;
use irlab::solver::{solve_pair, SolveConfig, ViewInput};
use irlab::synth::{synthetic_prior, two_view_fixture};

fn main() -> irlab::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(64, |s| s.parse().expect("size is an integer"));
    let prior = synthetic_prior(79, 18, 1)?;
    let [a, b] = two_view_fixture(size, 11, &prior)?;
    let inputs = [&a, &b].map(|v| ViewInput {
        image: &v.image,
        sky: None,
        guide: Some(&v.depth),
    });
    let b_into_a = Warp::new(&a.depth, b.depth.camera(), b.image.dims());
    let a_into_b = Warp::new(&b.depth, a.depth.camera(), a.image.dims());
    let discrepancy = |x: &PixelGrid<Rgb>, y: &PixelGrid<Rgb>| -> irlab::Result<f64> {
        let d1 = albedo_consistency_loss(x, &b_into_a.apply(y)?)?.value;
        let d2 = albedo_consistency_loss(y, &a_into_b.apply(x)?)?.value;
        Ok(0.5 * (d1 + d2))
    };
    println!("true albedos:  discrepancy {:.3}", discrepancy(&a.albedo, &b.albedo)?);

    let coupled = SolveConfig::default();
    let mut decoupled = coupled;
    decoupled.weights.albedo = 0.0;
    decoupled.weights.cross_render = 0.0;
    for (label, cfg) in [("coupled", coupled), ("decoupled", decoupled)] {
        let s = solve_pair(&inputs[0], &inputs[1], &prior, &cfg)?;
        let [sa, sb] = &s.views;
        println!(
            "{label:<10}    discrepancy {:.3}, appearance {:.2e} / {:.2e}",
            discrepancy(&sa.estimate.albedo(), &sb.estimate.albedo())?,
            sa.final_terms.appearance,
            sb.final_terms.appearance
        );
    }
    Ok(())
}
