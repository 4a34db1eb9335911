use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mspde::experiments::output::TRAJECTORIES_FILE;
use mspde::experiments::{
    emit_outputs, run_assumption_check, run_average, run_deviate, run_galerkin, run_poisson, run_sigma,
    run_simulate, run_strong_rate, run_weak_rate, write_json, write_trajectories_csv, Profile, SimConfig, Status,
};

#[derive(Parser)]
#[command(name = "mspde", version, about = "Slow-fast stochastic PDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to MSPDE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// One coupled path with its averaged path; writes trajectories.csv.
    Simulate,
    /// Averaged drift at the initial slow state.
    Average,
    /// Corrector of the fluctuation at the initial state.
    Poisson,
    /// Limit diffusion at the initial slow state.
    Sigma,
    /// Deviation weak error at the first eps.
    Deviate,
    /// Strong averaging rate; writes rates.csv and slopes.json.
    RatesStrong,
    /// Weak deviation rate; writes rates.csv and slopes.json.
    RatesWeak,
    /// Galerkin convergence across levels.
    Galerkin,
    /// Trace conditions, growth and moment diagnostics.
    Check,
}

fn load(cli: &Cli) -> mspde::Result<SimConfig> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Full => Profile::Full,
    };
    let mut cfg = match &cli.config {
        Some(path) => SimConfig::from_file(path, profile)?,
        None => SimConfig::profile(profile),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    if cli.threads.is_some() {
        cfg.run.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report<T: Serialize>(cfg: &SimConfig, name: &str, value: &T) -> mspde::Result<()> {
    let path = cfg.run.out.join(format!("{name}.json"));
    write_json(&path, value)?;
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> mspde::Result<Status> {
    let cfg = load(cli)?;
    if let Some(threads) = cfg.threads() {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = cfg.run.out.clone();
    let status = match cli.command {
        Command::Simulate => {
            let (r, rows) = run_simulate(&cfg)?;
            write_trajectories_csv(&out.join(TRAJECTORIES_FILE), &r.config_hash, &rows)?;
            report(&cfg, "simulate", &r)?;
            r.status
        }
        Command::Average => {
            let r = run_average(&cfg)?;
            report(&cfg, "average", &r)?;
            r.status
        }
        Command::Poisson => {
            let r = run_poisson(&cfg)?;
            report(&cfg, "poisson", &r)?;
            r.status
        }
        Command::Sigma => {
            let r = run_sigma(&cfg)?;
            report(&cfg, "sigma", &r)?;
            r.status
        }
        Command::Deviate => {
            let r = run_deviate(&cfg)?;
            report(&cfg, "deviate", &r)?;
            r.status
        }
        Command::RatesStrong => {
            let r = run_strong_rate(&cfg)?;
            emit_outputs(&out, &[&r])?;
            print_fits(&r);
            r.status
        }
        Command::RatesWeak => {
            let (r, _) = run_weak_rate(&cfg)?;
            emit_outputs(&out, &[&r])?;
            print_fits(&r);
            r.status
        }
        Command::Galerkin => {
            let r = run_galerkin(&cfg)?;
            report(&cfg, "galerkin", &r)?;
            r.status
        }
        Command::Check => {
            let r = run_assumption_check(&cfg)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            report(&cfg, "check", &r)?;
            r.status
        }
    };
    Ok(status)
}

fn print_fits(r: &mspde::experiments::RateReport) {
    for f in &r.fits {
        let slope = f.slope.map_or("-".into(), |s| format!("{s:.3}"));
        let r2 = f.r_squared.map_or("-".into(), |s| format!("{s:.3}"));
        println!(
            "{:<24} gamma={:<5} q={:<3} slope={slope} r2={r2} {:?}{}",
            f.experiment,
            f.gamma,
            f.q,
            f.status,
            f.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    for n in &r.notes {
        eprintln!("note: {n}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
