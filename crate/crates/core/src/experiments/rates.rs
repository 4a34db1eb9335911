//! Rate studies over a list of `eps`: strong error, fluctuation integral
//! and weak deviation error, each with a log-log fit.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{BuiltModel, SimConfig};
use super::{timestamp, Status, VERSION};
use crate::deviation::{weak_error, WeakErrorReport, WeakErrorSetup};
use crate::error::{Error, Result};
use crate::integrators::{simulate_bundle, FluctuationWindow, OutputTimes, SimOptions};
use crate::rng::{derive_seed, stream};
use crate::spectral::weighted_norm_sq;
use crate::stats::{ols_slope, Estimate};

/// Share of quarantined paths above which a rate point is refused.
pub const QUARANTINE_LIMIT: f64 = 0.05;
/// Half-width of the strong and fluctuation slope windows around `q / 2`.
pub const STRONG_WINDOW: f64 = 0.2;
pub const STRONG_MIN_R2: f64 = 0.95;
/// Smallest accepted weak slope.
pub const WEAK_MIN_SLOPE: f64 = 0.3;

const TAG_STRONG: u64 = 0x5354;
const TAG_KEY: u64 = 0x4b45;
const TAG_DRIFT: u64 = 0x4452;

/// One row of `rates.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub experiment: String,
    pub epsilon: f64,
    pub gamma: f64,
    pub q: f64,
    pub error: f64,
    pub stderr: f64,
    pub n: usize,
    /// Paths that entered the estimate.
    pub paths: usize,
    /// Paths dropped after a divergence; `paths + quarantined` is the budget.
    pub quarantined: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub experiment: String,
    pub gamma: f64,
    pub q: f64,
    /// Slope of `log2 error` against `log2 eps`.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub points: usize,
    pub window: (f64, f64),
    pub status: Status,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub experiment: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: u64,
    pub points: Vec<RatePoint>,
    pub fits: Vec<RateFit>,
    pub status: Status,
    pub notes: Vec<String>,
}

impl RateReport {
    fn new(experiment: &str, cfg: &SimConfig, points: Vec<RatePoint>, fits: Vec<RateFit>, notes: Vec<String>) -> Self {
        let status = fits.iter().fold(Status::Pass, |s, f| s.and(f.status));
        RateReport {
            experiment: experiment.into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.run.seed,
            timestamp: timestamp(),
            points,
            fits,
            status,
            notes,
        }
    }

    pub fn fit(&self, experiment: &str, gamma: f64, q: f64) -> Option<&RateFit> {
        self.fits
            .iter()
            .find(|f| f.experiment == experiment && f.gamma == gamma && f.q == q)
    }
}

/// OLS of `log2 error` on `log2 eps` over the points of one series. The fit
/// passes when the slope lies in `window` and, if given, `R^2 >= min_r2`.
pub fn fit_rate(
    experiment: &str,
    gamma: f64,
    q: f64,
    points: &[RatePoint],
    window: (f64, f64),
    min_r2: Option<f64>,
) -> RateFit {
    let series: Vec<&RatePoint> = points
        .iter()
        .filter(|p| p.experiment == experiment && p.gamma == gamma && p.q == q)
        .collect();
    let mut fit = RateFit {
        experiment: experiment.into(),
        gamma,
        q,
        slope: None,
        slope_stderr: None,
        intercept: None,
        r_squared: None,
        points: series.len(),
        window,
        status: Status::Fail,
        note: None,
    };
    if series.iter().any(|p| !(p.error > 0.0) || !p.error.is_finite()) {
        fit.note = Some("nonpositive error; no log-log fit".into());
        return fit;
    }
    let xy: Vec<(f64, f64)> = series.iter().map(|p| (p.epsilon.log2(), p.error.log2())).collect();
    match ols_slope(&xy) {
        None => fit.note = Some("fewer than two distinct eps values".into()),
        Some(l) => {
            fit.slope = Some(l.slope);
            fit.slope_stderr = Some(l.slope_stderr);
            fit.intercept = Some(l.intercept);
            fit.r_squared = Some(l.r_squared);
            let in_window = l.slope >= window.0 && l.slope <= window.1;
            let r2_ok = min_r2.is_none_or(|r| l.r_squared >= r);
            fit.status = Status::from_bool(in_window && r2_ok);
        }
    }
    fit
}

fn require_eps_list(cfg: &SimConfig) -> Result<()> {
    if cfg.rates.eps.len() < 2 {
        return Err(Error::config("a rate study needs at least two eps values"));
    }
    Ok(())
}

struct PathRecord {
    distances: Vec<Vec<f64>>,
    fluctuation: Option<Vec<f64>>,
}

/// Runs `paths` coupled/averaged bundles at one `eps`, quarantining
/// divergent paths.
fn run_paths(cfg: &SimConfig, built: &BuiltModel, i: usize, eps: f64, fluctuation: bool) -> Result<(Vec<PathRecord>, usize)> {
    let n = built.model.n();
    let seed = cfg.run.seed;
    let horizon = cfg.rates.horizon;
    let dt = cfg.dt(eps, horizon);
    let drift = built.drift(&cfg.ergodic, eps, dt, derive_seed(seed, &[TAG_DRIFT, i as u64]), n);
    let (x0, y0) = cfg.model.initial_state(n);
    let mut opts = SimOptions::new(x0, y0)
        .with_averaged(drift)
        .with_gammas(&cfg.rates.gammas)
        .with_output(OutputTimes::Equispaced(cfg.rates.output_times));
    if fluctuation {
        opts.fluctuation = Some(FluctuationWindow { start: 0.0 });
    }
    let m = cfg.rates.paths;
    let outcomes: Vec<Result<Option<PathRecord>>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, &[TAG_STRONG, p as u64]);
            let o = opts.clone().with_drift_key(derive_seed(seed, &[TAG_KEY, p as u64]));
            match simulate_bundle(&built.model, eps, horizon, dt, &mut rng, &o) {
                Ok(b) => Ok(Some(PathRecord {
                    distances: b.distances,
                    fluctuation: b.fluctuation.map(|f| f.into_coeffs()),
                })),
                Err(Error::Divergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(m);
    for o in outcomes {
        if let Some(r) = o? {
            records.push(r);
        }
    }
    let quarantined = m - records.len();
    if quarantined as f64 > QUARANTINE_LIMIT * m as f64 {
        return Err(Error::Quarantine { quarantined, paths: m });
    }
    Ok((records, quarantined))
}

/// `sup_t E ||(-A)^gamma (X^eps_t - X_bar_t)||^q` over the output times.
fn sup_moment(records: &[PathRecord], g: usize, q: f64) -> Estimate {
    let times = records.first().map(|r| r.distances[g].len()).unwrap_or(0);
    let mut best = Estimate { mean: 0.0, stderr: 0.0 };
    for t in 0..times {
        let xs: Vec<f64> = records.iter().map(|r| r.distances[g][t].powf(q / 2.0)).collect();
        let e = Estimate::from_samples(&xs);
        if e.mean > best.mean {
            best = e;
        }
    }
    best
}

fn point(experiment: &str, cfg: &SimConfig, eps: f64, gamma: f64, q: f64, est: Estimate, used: usize, quarantined: usize) -> RatePoint {
    RatePoint {
        experiment: experiment.into(),
        epsilon: eps,
        gamma,
        q,
        error: est.mean,
        stderr: est.stderr,
        n: cfg.model.n,
        paths: used,
        quarantined,
        seed: cfg.run.seed,
    }
}

/// Strong error `sup_t E ||(-A)^gamma (X^eps_t - X_bar_t)||^q` for every
/// `(eps, gamma, q)`, with slope windows `q / 2 +- 0.2`. When
/// `rates.fluctuation` is set the fluctuation integral is recorded on the
/// same paths.
pub fn run_strong_rate(cfg: &SimConfig) -> Result<RateReport> {
    strong_like(cfg, true, cfg.rates.fluctuation)
}

/// Only the fluctuation integral `E ||(-A)^gamma int_0^T e^{(T-r)A} delta F dr||^2`,
/// slope window `[0.8, 1.2]`.
pub fn run_fluctuation_rate(cfg: &SimConfig) -> Result<RateReport> {
    strong_like(cfg, false, true)
}

fn strong_like(cfg: &SimConfig, strong: bool, fluctuation: bool) -> Result<RateReport> {
    cfg.validate()?;
    require_eps_list(cfg)?;
    let built = cfg.model.build(cfg.model.n, None)?;
    let eigs = built.model.op_a.eigenvalues().to_vec();
    let mut points = Vec::new();
    let mut notes = Vec::new();
    if !built.model.f.meta().scheme_guarantee() {
        notes.push("reaction map is only Holder continuous: no convergence guarantee".into());
    }
    for (i, &eps) in cfg.rates.eps.iter().enumerate() {
        let (records, quarantined) = run_paths(cfg, &built, i, eps, fluctuation)?;
        let used = records.len();
        if quarantined > 0 {
            notes.push(format!("eps = {eps}: {quarantined} of {} paths quarantined", cfg.rates.paths));
        }
        for (g, &gamma) in cfg.rates.gammas.iter().enumerate() {
            if strong {
                for &q in &cfg.rates.qs {
                    points.push(point("strong", cfg, eps, gamma, q, sup_moment(&records, g, q), used, quarantined));
                }
            }
            if fluctuation {
                let xs: Vec<f64> = records
                    .iter()
                    .map(|r| weighted_norm_sq(&eigs, gamma, r.fluctuation.as_deref().expect("fluctuation recorded")))
                    .collect();
                points.push(point("fluctuation", cfg, eps, gamma, 2.0, Estimate::from_samples(&xs), used, quarantined));
            }
        }
    }
    let mut fits = Vec::new();
    for &gamma in &cfg.rates.gammas {
        if strong {
            for &q in &cfg.rates.qs {
                let w = (q / 2.0 - STRONG_WINDOW, q / 2.0 + STRONG_WINDOW);
                fits.push(fit_rate("strong", gamma, q, &points, w, Some(STRONG_MIN_R2)));
            }
        }
        if fluctuation {
            let w = (1.0 - STRONG_WINDOW, 1.0 + STRONG_WINDOW);
            fits.push(fit_rate("fluctuation", gamma, 2.0, &points, w, Some(STRONG_MIN_R2)));
        }
    }
    let name = if strong { "strong" } else { "fluctuation" };
    Ok(RateReport::new(name, cfg, points, fits, notes))
}

/// Weak deviation error `|E phi(Z^eps_T) - E phi(Z_bar_T)|` per test
/// functional. A functional is inconclusive when some point does not clear
/// two standard errors; otherwise it passes with slope `>= 0.3`.
pub fn run_weak_rate(cfg: &SimConfig) -> Result<(RateReport, Vec<WeakErrorReport>)> {
    cfg.validate()?;
    require_eps_list(cfg)?;
    let n = cfg.model.n;
    let built = cfg.model.build(n, None)?;
    let (x0, y0) = cfg.model.initial_state(n);
    let seed = cfg.run.seed;
    let horizon = cfg.rates.horizon;
    let setup = |eps: Vec<f64>, drift: Arc<dyn crate::integrators::AveragedDrift>| WeakErrorSetup {
        eps,
        horizon,
        functionals: cfg.weak.functionals.clone(),
        paths: cfg.weak.paths,
        seed,
        x0: x0.clone(),
        y0: y0.clone(),
        coeffs: built.coefficients(cfg, drift.clone()),
        drift,
        dt: cfg.rates.dt,
        zbar_steps: cfg.weak.zbar_steps,
    };
    let reports = if built.linear.is_some() {
        let drift = built.drift(&cfg.ergodic, 1.0, 1.0, seed, n);
        weak_error(&built.model, &setup(cfg.rates.eps.clone(), drift))?
    } else {
        // The averaged drift is estimated on the coupled fast step, which
        // depends on eps, so every eps gets its own limit ensemble.
        let mut all = Vec::new();
        for (i, &eps) in cfg.rates.eps.iter().enumerate() {
            let dt = cfg.dt(eps, horizon);
            let drift = built.drift(&cfg.ergodic, eps, dt, derive_seed(seed, &[TAG_DRIFT, i as u64]), n);
            all.extend(weak_error(&built.model, &setup(vec![eps], drift))?);
        }
        all
    };

    let points: Vec<RatePoint> = reports
        .iter()
        .map(|r| RatePoint {
            experiment: format!("weak:{}", r.functional),
            epsilon: r.eps,
            gamma: 0.0,
            q: 1.0,
            error: r.diff.abs(),
            stderr: r.diff_stderr,
            n,
            paths: r.paths,
            quarantined: 0,
            seed,
        })
        .collect();
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    for phi in &cfg.weak.functionals {
        let name = format!("weak:{}", phi.name());
        let rows: Vec<&WeakErrorReport> = reports.iter().filter(|r| r.functional == phi.name()).collect();
        let mut fit = fit_rate(&name, 0.0, 1.0, &points, (WEAK_MIN_SLOPE, f64::INFINITY), None);
        if rows.iter().all(|r| r.diff == 0.0 && r.diff_stderr == 0.0) {
            fit.status = Status::Pass;
            fit.note = Some("weak error identically zero; slope test skipped".into());
        } else if let Some(r) = rows.iter().find(|r| !r.significant()) {
            fit.status = Status::Inconclusive;
            fit.note = Some(format!(
                "noise floor: |diff| = {:.3e} within 2 SE ({:.3e}) at eps = {}",
                r.diff.abs(),
                r.diff_stderr,
                r.eps
            ));
        }
        if let Some(note) = &fit.note {
            notes.push(format!("{name}: {note}"));
        }
        fits.push(fit);
    }
    Ok((RateReport::new("weak", cfg, points, fits, notes), reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::Profile;

    fn pts(errors: &[(f64, f64)]) -> Vec<RatePoint> {
        errors
            .iter()
            .map(|&(eps, error)| RatePoint {
                experiment: "strong".into(),
                epsilon: eps,
                gamma: 0.0,
                q: 2.0,
                error,
                stderr: 0.0,
                n: 1,
                paths: 1,
                quarantined: 0,
                seed: 0,
            })
            .collect()
    }

    #[test]
    fn fit_recovers_exact_power() {
        let p = pts(&[(0.5, 3.0 * 0.5), (0.25, 3.0 * 0.25), (0.125, 3.0 * 0.125)]);
        let f = fit_rate("strong", 0.0, 2.0, &p, (0.8, 1.2), Some(0.95));
        assert!((f.slope.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f.status, Status::Pass);
        let g = fit_rate("strong", 0.0, 2.0, &pts(&[(0.5, 1.0), (0.25, 0.0)]), (0.8, 1.2), None);
        assert_eq!(g.status, Status::Fail);
        assert!(g.note.is_some());
    }

    #[test]
    fn single_eps_is_a_config_error() {
        let cfg = SimConfig::from_toml_str("[rates]\neps = [0.25]\npaths = 4\n", Profile::Desk).unwrap();
        assert!(matches!(run_strong_rate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn decoupled_bench_has_zero_strong_error() {
        let toml = "[model]\nn = 4\ncoupling = []\n[rates]\neps = [0.25, 0.125]\npaths = 8\n";
        let cfg = SimConfig::from_toml_str(toml, Profile::Desk).unwrap();
        let r = run_strong_rate(&cfg).unwrap();
        assert!(r.points.iter().all(|p| p.error == 0.0));
        assert_eq!(r.status, Status::Fail);
    }
}
