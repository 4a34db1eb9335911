use serde::Serialize;

use super::{NoiseSpectrum, OperatorSpectrum, SpectrumSource};
use crate::error::{check_len, check_positive, Result};

/// Level at which formula-backed spectra are re-evaluated for diagnostics.
const DIAGNOSTIC_LEVEL: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesStatus {
    /// Dyadic block sums shrink by a factor below 0.6.
    Converging,
    /// Block sums shrink, but slowly; convergence is not established.
    Slow,
    /// Block sums do not shrink.
    Divergent,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesCheck {
    pub name: &'static str,
    pub level: usize,
    pub partial_half: f64,
    pub partial_full: f64,
    /// `(S(n) - S(n/2)) / (S(n/2) - S(n/4))`.
    pub tail_ratio: f64,
    pub status: SeriesStatus,
}

impl SeriesCheck {
    fn new(name: &'static str, terms: &[f64]) -> Self {
        let n = terms.len();
        let partial = |m: usize| terms[..m].iter().sum::<f64>();
        let (s4, s2, s1) = (partial(n / 4), partial(n / 2), partial(n));
        let tail_ratio = if n >= 4 && s2 > s4 {
            (s1 - s2) / (s2 - s4)
        } else {
            f64::NAN
        };
        let status = if tail_ratio < 0.6 {
            SeriesStatus::Converging
        } else if tail_ratio < 1.0 {
            SeriesStatus::Slow
        } else {
            SeriesStatus::Divergent
        };
        SeriesCheck {
            name,
            level: n,
            partial_half: s2,
            partial_full: s1,
            tail_ratio,
            status,
        }
    }

    pub fn passes(&self) -> bool {
        self.status == SeriesStatus::Converging
    }
}

/// Quadrature of `Upsilon_t^{(1+theta)/2}` near `t = 0`.
#[derive(Clone, Debug, Serialize)]
pub struct UpsilonCheck {
    pub theta: f64,
    pub horizon: f64,
    pub level: usize,
    /// Lower integration limits, decreasing.
    pub delta_grid: Vec<f64>,
    /// `int_delta^T Upsilon_t^{(1+theta)/2} dt` for each entry of `delta_grid`.
    pub integral: Vec<f64>,
    /// Fitted exponent `p` of the integrand `~ t^p` over the smallest decade.
    pub local_power: f64,
    /// Raised when `local_power < -1`: the integral diverges as `delta -> 0`.
    pub warn: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceReport {
    pub tr_q1: SeriesCheck,
    pub tr_q2: SeriesCheck,
    pub tr_a_q1: SeriesCheck,
    pub upsilon: UpsilonCheck,
}

impl TraceReport {
    pub fn trace_conditions_pass(&self) -> bool {
        self.tr_q1.passes() && self.tr_q2.passes() && self.tr_a_q1.passes()
    }
}

fn diagnostic_values(values: &[f64], source: &SpectrumSource) -> Vec<f64> {
    match *source {
        SpectrumSource::PowerLaw { scale, exponent } if values.len() < DIAGNOSTIC_LEVEL => {
            (1..=DIAGNOSTIC_LEVEL)
                .map(|k| scale * (k as f64).powf(exponent))
                .collect()
        }
        _ => values.to_vec(),
    }
}

/// Trace-class and integrability diagnostics for the operator and noise
/// spectra. Never fails on a violated condition; it only reports.
///
/// Formula-backed spectra are re-evaluated at a deeper level (1024 modes) so
/// that tail behaviour is visible even for small Galerkin truncations.
pub fn check_trace_conditions(
    op_a: &OperatorSpectrum,
    op_b: &OperatorSpectrum,
    q1: &NoiseSpectrum,
    q2: &NoiseSpectrum,
    horizon: f64,
    theta: f64,
) -> Result<TraceReport> {
    check_len("trace check (A vs Q1)", op_a.len(), q1.len())?;
    check_len("trace check (B vs Q2)", op_b.len(), q2.len())?;
    check_positive("T", horizon)?;

    let lam1 = diagnostic_values(q1.variances(), q1.source());
    let lam2 = diagnostic_values(q2.variances(), q2.source());
    let alpha = diagnostic_values(op_a.eigenvalues(), op_a.source());
    let beta = diagnostic_values(op_b.eigenvalues(), op_b.source());

    let n1 = lam1.len().min(alpha.len());
    let a_q1: Vec<f64> = alpha[..n1]
        .iter()
        .zip(&lam1[..n1])
        .map(|(a, l)| a * l)
        .collect();

    let n2 = lam2.len().min(beta.len());
    let upsilon = upsilon_check(&beta[..n2], &lam2[..n2], horizon, theta);

    Ok(TraceReport {
        tr_q1: SeriesCheck::new("Tr(Q1)", &lam1),
        tr_q2: SeriesCheck::new("Tr(Q2)", &lam2),
        tr_a_q1: SeriesCheck::new("Tr((-A)Q1)", &a_q1),
        upsilon,
    })
}

fn upsilon(beta: &[f64], lambda: &[f64], t: f64) -> f64 {
    beta.iter()
        .zip(lambda)
        .map(|(b, l)| 2.0 * b / (l * (2.0 * b * t).exp_m1()))
        .fold(0.0, f64::max)
}

fn upsilon_check(beta: &[f64], lambda: &[f64], horizon: f64, theta: f64) -> UpsilonCheck {
    let power = 0.5 * (1.0 + theta);
    let integrand = |t: f64| upsilon(beta, lambda, t).powf(power);

    // Resolved range: below ~1/beta_max the truncated sup saturates.
    let beta_max = beta.last().copied().unwrap_or(1.0);
    let t_min = (10.0 / beta_max).min(0.1 * horizon);
    let points: usize = 64;
    let ratio = (horizon / t_min).powf(1.0 / (points - 1) as f64);
    let grid: Vec<f64> = (0..points).map(|i| t_min * ratio.powi(i as i32)).collect();
    let values: Vec<f64> = grid.iter().map(|&t| integrand(t)).collect();

    // Cumulative integral from T down to each grid point (trapezoid in t).
    let mut delta_grid = Vec::with_capacity(points);
    let mut integral = Vec::with_capacity(points);
    let mut acc = 0.0;
    delta_grid.push(horizon);
    integral.push(0.0);
    for i in (0..points - 1).rev() {
        acc += 0.5 * (values[i] + values[i + 1]) * (grid[i + 1] - grid[i]);
        delta_grid.push(grid[i]);
        integral.push(acc);
    }

    // Local power over the smallest decade of the grid.
    let decade: Vec<(f64, f64)> = grid
        .iter()
        .zip(&values)
        .take_while(|(t, _)| **t <= 10.0 * t_min)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    let local_power = crate::stats::ols_slope(&decade).map_or(f64::NAN, |f| f.slope);

    UpsilonCheck {
        theta,
        horizon,
        level: beta.len(),
        delta_grid,
        integral,
        local_power,
        warn: !(local_power >= -1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(n: usize) -> (OperatorSpectrum, OperatorSpectrum, NoiseSpectrum, NoiseSpectrum) {
        (
            OperatorSpectrum::dirichlet_laplacian(n),
            OperatorSpectrum::dirichlet_laplacian(n),
            NoiseSpectrum::power_law(n, 1.0, -4.0).unwrap(),
            NoiseSpectrum::power_law(n, 1.0, -2.0).unwrap(),
        )
    }

    #[test]
    fn reference_spectra_pass_trace_checks_and_warn_on_upsilon() {
        let (a, b, q1, q2) = reference(8);
        let r = check_trace_conditions(&a, &b, &q1, &q2, 1.0, 1.0).unwrap();
        assert!(r.trace_conditions_pass(), "{r:#?}");
        assert!(r.upsilon.warn);
        assert!(r.upsilon.local_power < -1.0);
        // the integral keeps growing as delta shrinks
        let last = r.upsilon.integral.len() - 1;
        assert!(r.upsilon.integral[last] > r.upsilon.integral[last / 2]);
    }

    #[test]
    fn a_q1_tail_ratio_at_64_modes() {
        // explicit lists so the check runs at exactly n = 64
        let a = OperatorSpectrum::from_values((1..=64).map(|k| (k * k) as f64).collect()).unwrap();
        let q1 = NoiseSpectrum::from_values((1..=64).map(|k| (k as f64).powi(-4)).collect()).unwrap();
        let q2 = NoiseSpectrum::from_values((1..=64).map(|k| (k as f64).powi(-2)).collect()).unwrap();
        let r = check_trace_conditions(&a, &a, &q1, &q2, 1.0, 1.0).unwrap();
        assert_eq!(r.tr_a_q1.level, 64);
        assert!(r.tr_a_q1.tail_ratio < 0.6);
        assert!(r.tr_a_q1.passes());
    }

    #[test]
    fn constant_noise_is_flagged_divergent() {
        let (a, b, _, q2) = reference(8);
        let q1 = NoiseSpectrum::power_law(8, 1.0, 0.0).unwrap();
        let r = check_trace_conditions(&a, &b, &q1, &q2, 1.0, 1.0).unwrap();
        assert_eq!(r.tr_q1.status, SeriesStatus::Divergent);

        let q1 = NoiseSpectrum::power_law(8, 1.0, -1.0).unwrap();
        let r = check_trace_conditions(&a, &b, &q1, &q2, 1.0, 1.0).unwrap();
        assert_eq!(r.tr_a_q1.status, SeriesStatus::Divergent);
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let (a, b, q1, _) = reference(8);
        let q2 = NoiseSpectrum::power_law(4, 1.0, -2.0).unwrap();
        assert!(check_trace_conditions(&a, &b, &q1, &q2, 1.0, 1.0).is_err());
    }
}
