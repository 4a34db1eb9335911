//! Single-point probes: one trajectory, `F_bar(x0)`, the corrector at
//! `(x0, y0)`, `sigma(x0)` and the deviation weak error at one `eps`.

use std::sync::Arc;

use serde::Serialize;

use super::config::SimConfig;
use super::output::{trajectory_rows, TrajectoryRow};
use super::{Status, VERSION};
use crate::averaging::{estimate_fbar, DeltaF, ErgodicEstimate};
use crate::deviation::{estimate_sigma, weak_error, SigmaEstimate, WeakErrorReport, WeakErrorSetup};
use crate::error::Result;
use crate::integrators::{simulate_bundle, OutputTimes, SimOptions};
use crate::poisson::{solve_poisson_vector, PoissonProblem, PoissonSolution};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub version: String,
    pub config_hash: String,
    pub model: String,
    pub eps: f64,
    pub dt: f64,
    pub steps: usize,
    pub dt_warning: bool,
    pub gammas: Vec<f64>,
    /// Path-wise `sup_t ||(-A)^gamma (X_t - X_bar_t)||`.
    pub sup_distance: Vec<f64>,
    pub status: Status,
}

/// One coupled path with its averaged companion at the first `eps`,
/// recorded at every step.
pub fn run_simulate(cfg: &SimConfig) -> Result<(SimulateReport, Vec<TrajectoryRow>)> {
    cfg.validate()?;
    let n = cfg.model.n;
    let built = cfg.model.build(n, None)?;
    let eps = cfg.rates.eps[0];
    let horizon = cfg.rates.horizon;
    let dt = cfg.dt(eps, horizon);
    let seed = cfg.run.seed;
    let (x0, y0) = cfg.model.initial_state(n);
    let mut opts = SimOptions::new(x0, y0)
        .with_averaged(built.drift(&cfg.ergodic, eps, dt, derive_seed(seed, &[1]), n))
        .with_gammas(&cfg.rates.gammas)
        .with_output(OutputTimes::EveryStep)
        .with_drift_key(derive_seed(seed, &[2]));
    opts.record_fast = true;
    let bundle = simulate_bundle(&built.model, eps, horizon, dt, &mut stream(seed, &[0]), &opts)?;
    let report = SimulateReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        model: built.model.name.clone(),
        eps,
        dt,
        steps: bundle.steps,
        dt_warning: bundle.dt_warning,
        gammas: bundle.gammas.clone(),
        sup_distance: bundle.sup_distance.clone(),
        status: Status::Pass,
    };
    Ok((report, trajectory_rows(&bundle)))
}

/// Whether `|a - b| <= max(k * se, rel * |b|)` componentwise.
fn within(a: &[f64], se: &[f64], b: &[f64], k: f64, rel: f64) -> bool {
    a.iter()
        .zip(se)
        .zip(b)
        .all(|((a, s), b)| (a - b).abs() <= (k * s).max(rel * b.abs()) + 1e-12)
}

#[derive(Clone, Debug, Serialize)]
pub struct AverageReport {
    pub version: String,
    pub config_hash: String,
    pub x: Vec<f64>,
    pub estimate: ErgodicEstimate,
    /// Closed form, when the model has one.
    pub closed_form: Option<Vec<f64>>,
    pub status: Status,
}

/// Ergodic estimate of `F_bar(x0)`; checked against the closed form
/// within 3 standard errors when one exists.
pub fn run_average(cfg: &SimConfig) -> Result<AverageReport> {
    cfg.validate()?;
    let built = cfg.model.build(cfg.model.n, None)?;
    let (x0, _) = cfg.model.initial_state(cfg.model.n);
    let budget = built.ergodic_budget(&cfg.ergodic, None);
    let estimate = estimate_fbar(&built.model, &x0, &budget, &mut stream(cfg.run.seed, &[0x4156]))?;
    let closed_form = built.linear.as_ref().map(|b| b.fbar(x0.coeffs()));
    let status = match &closed_form {
        Some(cf) => Status::from_bool(within(&estimate.value, &estimate.stderr, cf, 3.0, 0.0)),
        None => Status::Pass,
    };
    Ok(AverageReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        x: x0.into_coeffs(),
        estimate,
        closed_form,
        status,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonReport {
    pub version: String,
    pub config_hash: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub solution: PoissonSolution,
    pub closed_form: Option<Vec<f64>>,
    pub status: Status,
}

/// Corrector `Psi(x0, y0)` of the fluctuation `F - F_bar(x0)`; checked
/// against the closed form within `max(3 SE, 5%)` when one exists.
pub fn run_poisson(cfg: &SimConfig) -> Result<PoissonReport> {
    cfg.validate()?;
    let built = cfg.model.build(cfg.model.n, None)?;
    let (x0, y0) = cfg.model.initial_state(cfg.model.n);
    let seed = cfg.run.seed;
    let drift = built.probe_drift(&cfg.ergodic, derive_seed(seed, &[0x5044]));
    let phi = DeltaF::new(&built.model, drift.as_ref(), x0.coeffs())?;
    let problem = PoissonProblem::new(&built.model, Arc::new(phi));
    let solution = solve_poisson_vector(&problem, &x0, &y0, &built.poisson_budget(&cfg.poisson), seed)?;
    let closed_form = built.linear.as_ref().map(|b| b.corrector(x0.coeffs(), y0.coeffs()));
    let status = match &closed_form {
        Some(cf) => Status::from_bool(within(&solution.value, &solution.stderr, cf, 3.0, 0.05)),
        None => Status::Pass,
    };
    Ok(PoissonReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        x: x0.into_coeffs(),
        y: y0.into_coeffs(),
        solution,
        closed_form,
        status,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaReport {
    pub version: String,
    pub config_hash: String,
    pub x: Vec<f64>,
    pub estimate: SigmaEstimate,
    /// Diagonal of the closed-form factor, when one exists.
    pub closed_form_diag: Option<Vec<f64>>,
    pub status: Status,
}

/// `sigma(x0)`; on the linear bench the diagonal must match the closed
/// form within 10% and the clipped mass stay below 5% of the trace.
pub fn run_sigma(cfg: &SimConfig) -> Result<SigmaReport> {
    cfg.validate()?;
    let built = cfg.model.build(cfg.model.n, None)?;
    let (x0, _) = cfg.model.initial_state(cfg.model.n);
    let seed = cfg.run.seed;
    let drift = built.probe_drift(&cfg.ergodic, derive_seed(seed, &[0x5347]));
    let estimate = estimate_sigma(&built.model, drift.as_ref(), &x0, &built.sigma_budget(cfg), seed)?;
    let closed_form_diag = built
        .linear
        .as_ref()
        .map(|b| b.sigma().diagonal().iter().copied().collect::<Vec<f64>>());
    let status = match &closed_form_diag {
        Some(cf) => {
            let diag: Vec<f64> = estimate.sigma.diagonal().iter().copied().collect();
            let zeros = vec![0.0; diag.len()];
            let clipped_ok = estimate.clipped_mass <= 0.05 * estimate.trace.max(f64::MIN_POSITIVE);
            Status::from_bool(within(&diag, &zeros, cf, 0.0, 0.10) && (clipped_ok || estimate.trace == 0.0))
        }
        None => Status::Pass,
    };
    Ok(SigmaReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        x: x0.into_coeffs(),
        estimate,
        closed_form_diag,
        status,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviateReport {
    pub version: String,
    pub config_hash: String,
    pub eps: f64,
    pub reports: Vec<WeakErrorReport>,
    pub status: Status,
}

/// Weak error of the rescaled deviation against the limit process at the
/// first `eps`, for every configured test functional.
pub fn run_deviate(cfg: &SimConfig) -> Result<DeviateReport> {
    cfg.validate()?;
    let n = cfg.model.n;
    let built = cfg.model.build(n, None)?;
    let (x0, y0) = cfg.model.initial_state(n);
    let eps = cfg.rates.eps[0];
    let dt = cfg.dt(eps, cfg.rates.horizon);
    let drift = built.drift(&cfg.ergodic, eps, dt, derive_seed(cfg.run.seed, &[0x4456]), n);
    let setup = WeakErrorSetup {
        eps: vec![eps],
        horizon: cfg.rates.horizon,
        functionals: cfg.weak.functionals.clone(),
        paths: cfg.weak.paths,
        seed: cfg.run.seed,
        x0,
        y0,
        coeffs: built.coefficients(cfg, drift.clone()),
        drift,
        dt: cfg.rates.dt,
        zbar_steps: cfg.weak.zbar_steps,
    };
    Ok(DeviateReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        eps,
        reports: weak_error(&built.model, &setup)?,
        status: Status::Pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::Profile;

    #[test]
    fn linear_probes_match_closed_forms() {
        let cfg = SimConfig::from_toml_str("[model]\nn = 4\n[poisson]\nreplicas = 2048\n", Profile::Desk).unwrap();
        assert_eq!(run_average(&cfg).unwrap().status, Status::Pass);
        let p = run_poisson(&cfg).unwrap();
        assert_eq!(p.status, Status::Pass, "{:?} vs {:?}", p.solution, p.closed_form);
        let (r, rows) = run_simulate(&cfg).unwrap();
        assert_eq!(rows.len(), 3 * 4 * (r.steps + 1));
    }
}
