//! Fits the natural-illumination prior: rotation augmentation of a set of
//! environments, then a principal subspace. Shows how well held-out
//! environments are represented as the dimension grows.
//!
//! cargo run --release --example illumination_prior -- [environments.txt]

use irlab::prior::{augment, build_prior, parse_coefficients, prior_energy};
use irlab::synth::natural_environments;

fn main() -> irlab::Result<()> {
    let environments = match std::env::args().nth(1) {
        Some(p) => parse_coefficients(&std::fs::read_to_string(p)?)?,
        None => natural_environments(79, 1),
    };
    let augmented = augment(&environments)?;
    println!("{} environments -> {} augmented samples", environments.len(), augmented.len());
    let held_out = natural_environments(40, 1234);
    for dim in [3, 6, 9, 18] {
        let prior = build_prior(&environments, dim, true)?;
        let energy: f64 = held_out
            .iter()
            .map(|l| prior_energy(&prior.encode(l).params))
            .sum::<f64>()
            / held_out.len() as f64;
        println!(
            "dim {dim:>2}: held-out rms residual {:.4}, mean prior energy {energy:.2}",
            prior.reconstruction_error(&held_out)?
        );
    }
    Ok(())
}
