//! Compares every analytic loss gradient with central differences on random
//! 8x8 instances and prints the worst relative error per gradient.
//!
//! cargo run --release --example gradient_check -- [first-seed] [count]

use irlab::gradcheck::{run, summarize, TOLERANCE};

fn main() -> irlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let first: u64 = args.next().map_or(1, |s| s.parse().expect("seed is an integer"));
    let count: u64 = args.next().map_or(10, |s| s.parse().expect("count is an integer"));
    let checks = run(first, count)?;
    for c in summarize(&checks) {
        println!("{:<36} {:>10.2e}  {}", c.name, c.error, if c.passed { "ok" } else { "FAIL" });
    }
    println!("{} checks over {count} seeds, tolerance {TOLERANCE:e}", checks.len());
    Ok(())
}
