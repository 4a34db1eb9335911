//! Experiment harnesses: rate studies, Galerkin convergence, assumption
//! checks and their file outputs.

pub mod check;
pub mod config;
pub mod galerkin;
pub mod output;
pub mod probes;
pub mod rates;

pub use check::{run_assumption_check, CheckReport};
pub use config::{Bench, BuiltModel, Profile, SimConfig};
pub use galerkin::{run_galerkin, GalerkinReport};
pub use probes::{run_average, run_deviate, run_poisson, run_sigma, run_simulate};
pub use output::{emit_outputs, read_rates_csv, trajectory_rows, write_json, write_trajectories_csv, TrajectoryRow};
pub use rates::{fit_rate, run_fluctuation_rate, run_strong_rate, run_weak_rate, RateFit, RatePoint, RateReport};

use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Outcome of an experiment; maps onto the CLI exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Inconclusive => 2,
        }
    }

    /// Failure dominates inconclusive, which dominates pass.
    pub fn and(self, other: Status) -> Status {
        match (self, other) {
            (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
            (Status::Inconclusive, _) | (_, Status::Inconclusive) => Status::Inconclusive,
            _ => Status::Pass,
        }
    }

    pub fn from_bool(ok: bool) -> Status {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

pub(crate) fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
