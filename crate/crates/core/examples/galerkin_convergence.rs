//! Galerkin truncations driven by common noise against a reference level.
//!
//! ```bash
//! cargo run --release --example galerkin_convergence -- [linear|nemytskii]
//! ```

use mspde::experiments::{run_galerkin, Bench, Profile, SimConfig};

fn main() -> mspde::Result<()> {
    let mut cfg = SimConfig::profile(Profile::Desk);
    cfg.model.bench = match std::env::args().nth(1).as_deref() {
        Some("linear") => Bench::Linear,
        _ => Bench::Nemytskii,
    };
    let r = run_galerkin(&cfg)?;
    println!("{:?} bench, eps = {}, reference level {}", cfg.model.bench, r.eps, r.n_ref);
    println!("  n   gamma  projected error      full error");
    for row in &r.rows {
        println!(
            "  {:<3} {:<5}  {:.3e} +- {:.1e}   {:.3e} +- {:.1e}",
            row.n, row.gamma, row.projected.mean, row.projected.stderr, row.full.mean, row.full.stderr
        );
    }
    println!("monotone: {}, exactly zero: {} -> {:?}", r.monotone, r.exact_zero, r.status);
    Ok(())
}
