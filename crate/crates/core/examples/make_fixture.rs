//! Writes the synthetic fixture bundle: 79 lighting environments, the prior
//! fitted to them, a single sphere view and a two-view pair, each with truth.
//!
//! cargo run --release --example make_fixture -- [out-dir] [size]

use std::path::PathBuf;

use irlab::prior::{build_prior, format_coefficients};
use irlab::synth::{natural_environments, sphere_fixture, two_view_fixture, write_fixture};

fn main() -> irlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "fixtures".into()));
    let size: usize = args.next().map_or(64, |s| s.parse().expect("size is an integer"));
    std::fs::create_dir_all(&out)?;

    let environments = natural_environments(79, 1);
    irlab::io::write_atomic(&out.join("environments.txt"), format_coefficients(&environments).as_bytes())?;
    let prior = build_prior(&environments, 18, true)?;
    prior.save(&out.join("prior.json"))?;
    println!("prior: {} samples, {} components", prior.samples(), prior.dim());

    let sphere = sphere_fixture(size, 7, &prior)?;
    write_fixture(&out.join("sphere"), &[("front", &sphere)])?;
    let [left, right] = two_view_fixture(size, 11, &prior)?;
    write_fixture(&out.join("pair"), &[("left", &left), ("right", &right)])?;
    println!("wrote {}", out.display());
    Ok(())
}
