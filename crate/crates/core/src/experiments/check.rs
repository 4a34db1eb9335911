//! Assumption diagnostics: trace conditions, growth of the reaction maps
//! and uniform-in-eps moment bounds.

use rayon::prelude::*;
use serde::Serialize;

use super::config::SimConfig;
use super::{timestamp, Status, VERSION};
use crate::error::{Error, Result};
use crate::integrators::{simulate_bundle, OutputTimes, SimOptions};
use crate::models::sample_growth;
use crate::rng::{derive_seed, stream};
use crate::spectral::{check_trace_conditions, TraceReport};
use crate::stats::Estimate;

/// Allowed relative spread of `sup_t E ||X^eps_t||^2` across `eps`, before
/// Monte Carlo slack.
pub const MOMENT_BAND: f64 = 0.2;

#[derive(Clone, Debug, Serialize)]
pub struct GrowthRow {
    pub map: &'static str,
    pub growth_degree: u32,
    /// Worst sampled `||M(x, y)|| / (1 + ||x|| + ||y||^p)`.
    pub worst_ratio: f64,
    pub growth_constant: f64,
    pub largest_norm: f64,
    pub bound: Option<f64>,
    pub scheme_guarantee: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentRow {
    pub eps: f64,
    /// `sup_t E ||X^eps_t||^2` over 17 output times.
    pub sup_second_moment: Estimate,
    /// `E ||X^eps_T||^2`.
    pub terminal_second_moment: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub version: String,
    pub config_hash: String,
    pub timestamp: u64,
    pub model: String,
    pub trace: TraceReport,
    pub growth: Vec<GrowthRow>,
    pub moments: Vec<MomentRow>,
    /// `max / min - 1` of the moment column.
    pub moment_spread: f64,
    /// Spread within 20% plus three standard errors.
    pub moments_bounded: bool,
    pub warnings: Vec<String>,
    pub status: Status,
}

pub fn run_assumption_check(cfg: &SimConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let n = cfg.model.n;
    let built = cfg.model.build(n, None)?;
    let model = &built.model;
    let horizon = cfg.rates.horizon;
    let seed = cfg.run.seed;
    let trace = check_trace_conditions(&model.op_a, &model.op_b, &model.q1, &model.q2, horizon, cfg.check.theta)?;
    let mut warnings = Vec::new();
    for s in [&trace.tr_q1, &trace.tr_q2, &trace.tr_a_q1] {
        if !s.passes() {
            warnings.push(format!("{}: series not shown to converge (tail ratio {:.3})", s.name, s.tail_ratio));
        }
    }
    if trace.upsilon.warn {
        warnings.push(format!(
            "Upsilon integrability: integrand ~ t^{:.2} near 0 for theta = {}",
            trace.upsilon.local_power, cfg.check.theta
        ));
    }

    let mut growth = Vec::new();
    for (name, map) in [("F", &model.f), ("G", &model.g)] {
        let meta = map.meta();
        let (worst, largest) = sample_growth(map.as_ref(), n, 10.0, cfg.check.growth_samples, derive_seed(seed, &[name.as_bytes()[0] as u64]));
        if worst > meta.growth_constant * (1.0 + 1e-9) {
            warnings.push(format!("{name}: sampled growth ratio {worst:.3} exceeds declared constant {}", meta.growth_constant));
        }
        if !meta.scheme_guarantee() {
            warnings.push(format!("{name}: only Holder continuous (exponent {}); no convergence guarantee", meta.holder_exponent));
        }
        growth.push(GrowthRow {
            map: name,
            growth_degree: meta.growth_degree,
            worst_ratio: worst,
            growth_constant: meta.growth_constant,
            largest_norm: largest,
            bound: meta.bound,
            scheme_guarantee: meta.scheme_guarantee(),
        });
    }

    let (x0, y0) = cfg.model.initial_state(n);
    let opts = SimOptions::new(x0, y0).with_output(OutputTimes::Equispaced(17));
    let mut moments = Vec::new();
    for (i, &eps) in cfg.check.eps.iter().enumerate() {
        let dt = cfg.dt(eps, horizon);
        let norms: Vec<Vec<f64>> = (0..cfg.check.paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(seed, &[0x4d4f, i as u64, p as u64]);
                let b = simulate_bundle(model, eps, horizon, dt, &mut rng, &opts)?;
                Ok(b.slow.iter().map(|x| x.norm_sq()).collect())
            })
            .collect::<Result<_>>()?;
        let times = norms.first().map(Vec::len).unwrap_or(0);
        let sup = (0..times)
            .map(|t| Estimate::from_samples(&norms.iter().map(|v| v[t]).collect::<Vec<_>>()))
            .fold(Estimate::default(), |a, b| if b.mean > a.mean { b } else { a });
        let terminal = Estimate::from_samples(&norms.iter().map(|v| v[times - 1]).collect::<Vec<_>>());
        moments.push(MomentRow {
            eps,
            sup_second_moment: sup,
            terminal_second_moment: terminal,
        });
    }
    let by_mean = |a: &&MomentRow, b: &&MomentRow| a.sup_second_moment.mean.total_cmp(&b.sup_second_moment.mean);
    let lo = moments.iter().min_by(by_mean).map(|m| m.sup_second_moment).unwrap_or_default();
    let hi = moments.iter().max_by(by_mean).map(|m| m.sup_second_moment).unwrap_or_default();
    if !(lo.mean > 0.0) {
        return Err(Error::config("moment sweep produced a zero second moment"));
    }
    let moment_spread = hi.mean / lo.mean - 1.0;
    // the band is widened by three combined standard errors
    let slack = 3.0 * (hi.stderr.powi(2) + lo.stderr.powi(2)).sqrt();
    let moments_bounded = hi.mean - lo.mean <= MOMENT_BAND * lo.mean + slack;
    if !moments_bounded {
        warnings.push(format!("moments vary by {:.1}% across eps", 100.0 * moment_spread));
    }
    let status = Status::from_bool(trace.trace_conditions_pass() && moments_bounded);
    Ok(CheckReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        timestamp: timestamp(),
        model: model.name.clone(),
        trace,
        growth,
        moments,
        moment_spread,
        moments_bounded,
        warnings,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::Profile;

    #[test]
    fn reference_model_passes_with_upsilon_warning() {
        let cfg = SimConfig::from_toml_str("[check]\npaths = 16\neps = [0.25, 0.0625]\n", Profile::Desk).unwrap();
        let r = run_assumption_check(&cfg).unwrap();
        assert!(r.trace.trace_conditions_pass());
        assert!(r.trace.upsilon.warn);
        assert!(r.moments_bounded, "{}", r.moment_spread);
        assert_eq!(r.status, Status::Pass);
    }
}
