//! Normal deviations: weak error between the rescaled deviation
//! `(X^eps - X_bar) / sqrt(eps)` and its Gaussian limit, per test function.
//!
//! ```bash
//! cargo run --release --example weak_deviation -- [paths]
//! ```

use mspde::deviation::TestFunctional;
use mspde::experiments::{run_weak_rate, Profile, SimConfig};

fn main() -> mspde::Result<()> {
    let mut cfg = SimConfig::profile(Profile::Desk);
    if let Some(paths) = std::env::args().nth(1) {
        cfg.weak.paths = paths.parse().expect("paths");
    }
    cfg.weak.functionals = vec![TestFunctional::CosFirst, TestFunctional::GaussianBump, TestFunctional::Constant(1.0)];
    let (report, rows) = run_weak_rate(&cfg)?;
    println!("functional        eps         E phi(Z^eps)   E phi(Z_bar)   diff        2 SE");
    for r in &rows {
        println!(
            "{:<16}  {:<10}  {:.5}        {:.5}        {:+.2e}   {:.2e}{}",
            r.functional,
            r.eps,
            r.z_eps.mean,
            r.z_bar.mean,
            r.diff,
            2.0 * r.diff_stderr,
            if r.significant() { "" } else { "  (noise)" }
        );
    }
    for f in &report.fits {
        println!("{}: slope {:?} -> {:?} {}", f.experiment, f.slope, f.status, f.note.clone().unwrap_or_default());
    }
    Ok(())
}
