//! Strong averaging rate: `sup_t E|(-A)^gamma (X^eps - X_bar)|^2` against
//! `eps`, with log-log fits, written to `rates.csv` and `slopes.json`.
//!
//! ```bash
//! cargo run --release --example strong_rate -- [config.toml] [out-dir]
//! ```

use std::path::{Path, PathBuf};

use mspde::experiments::{emit_outputs, run_strong_rate, Profile, SimConfig};

fn main() -> mspde::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => SimConfig::from_file(Path::new(&path), Profile::Desk)?,
        None => SimConfig::profile(Profile::Desk),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/strong_rate".into()));
    let report = run_strong_rate(&cfg)?;
    for p in &report.points {
        println!("eps {:<10} gamma {:<5} error {:.4e} +- {:.1e}", p.epsilon, p.gamma, p.error, p.stderr);
    }
    for f in &report.fits {
        println!(
            "{} gamma = {}: slope {:.3} (window [{}, {}]), R^2 {:.3} -> {:?}",
            f.experiment,
            f.gamma,
            f.slope.unwrap_or(f64::NAN),
            f.window.0,
            f.window.1,
            f.r_squared.unwrap_or(f64::NAN),
            f.status
        );
    }
    emit_outputs(&out, &[&report])?;
    println!("wrote {}", out.display());
    Ok(())
}
