//! Feynman-Kac Monte Carlo solution of the fast Poisson equation
//! `L2 psi(x, .) = -phi(x, .)`:
//!
//! ```text
//! psi(x, y) = int_0^inf E phi(x, Y^x_t(y)) dt
//! ```
//!
//! The integral is truncated at a horizon `T*` chosen from an exponential fit
//! to the decaying replica mean, and discretized by the trapezoid rule on the
//! frozen-equation step grid. Vector-valued observables share one set of fast
//! paths across all components.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::averaging::{frozen_series, ErgodicBudget, Observable};
use crate::error::{check_positive, Error, Result};
use crate::integrators::{FrozenScratch, FrozenStepper};
use crate::models::ModelSpec;
use crate::rng::{derive_seed, stream};
use crate::spectral::SpectralField;
use crate::stats::{ols_slope, SampleSeries};

/// Largest `||y||` accepted by the solver.
pub const MAX_FAST_NORM: f64 = 1e3;

/// Observable `phi` together with the model whose fast generator defines
/// `L2`.
#[derive(Clone)]
pub struct PoissonProblem {
    model: ModelSpec,
    observable: Arc<dyn Observable>,
    /// Growth degree `p` of `phi` in `y`.
    pub growth_degree: u32,
    /// Holder exponent of `phi` in `y`.
    pub holder_exponent: f64,
}

impl PoissonProblem {
    pub fn new(model: &ModelSpec, observable: Arc<dyn Observable>) -> Self {
        let growth_degree = observable.growth_degree();
        PoissonProblem {
            model: model.clone(),
            observable,
            growth_degree,
            holder_exponent: 1.0,
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn observable(&self) -> &dyn Observable {
        self.observable.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.observable.dim()
    }

    /// Truncation horizon `T* = ln(C / tol) / lambda` from a pilot ensemble
    /// started at `y`. Returns `0` when `phi` vanishes along every pilot path.
    pub fn fit_horizon(&self, x: &[f64], y: &[f64], budget: &PoissonBudget, seed: u64) -> Result<f64> {
        let model = &self.model;
        let dim = self.dim();
        let steps = (budget.max_horizon / budget.dt).ceil().max(1.0) as usize;
        let stride = (steps / 200).max(1);
        let lag_steps: Vec<usize> = (0..=steps).step_by(stride).collect();
        let stepper = FrozenStepper::new(model, budget.dt);
        let n = model.n();
        let pilots = budget.pilot_replicas.max(2);

        let rows: Vec<Result<Vec<f64>>> = (0..pilots)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(seed, &[0x7069_6c6f, r as u64]);
                let mut yy = y.to_vec();
                let mut scratch = FrozenScratch::new(n);
                let mut out = vec![0.0; dim];
                let mut row = Vec::with_capacity(lag_steps.len() * dim);
                let mut next = 0;
                for step in 0..=steps {
                    if step > 0 {
                        stepper.step_rng(model, x, &mut yy, &mut scratch, &mut rng);
                        if !yy.iter().all(|v| v.is_finite()) {
                            return Err(Error::Divergence { step });
                        }
                    }
                    if next < lag_steps.len() && lag_steps[next] == step {
                        self.observable.eval(x, &yy, &mut out);
                        row.extend_from_slice(&out);
                        next += 1;
                    }
                }
                Ok(row)
            })
            .collect();
        let mut series = SampleSeries::with_capacity(lag_steps.len() * dim, pilots);
        for r in rows {
            series.push(&r?);
        }
        let mean = series.mean();
        let m = pilots as f64;
        let mut env = Vec::with_capacity(lag_steps.len());
        for (j, &s) in lag_steps.iter().enumerate() {
            let mut m2 = 0.0;
            let mut v2 = 0.0;
            for c in 0..dim {
                let idx = j * dim + c;
                m2 += mean[idx] * mean[idx];
                let var = (0..series.len())
                    .map(|i| (series.sample(i)[idx] - mean[idx]).powi(2))
                    .sum::<f64>()
                    / (m - 1.0);
                v2 += var / m;
            }
            env.push((s as f64 * budget.dt, m2.sqrt(), v2.sqrt()));
        }
        let scale = env.iter().fold(0.0f64, |a, e| a.max(e.1));
        if scale == 0.0 {
            return Ok(0.0);
        }
        // Leading run of lags whose mean clears the noise floor; isolated
        // late excursions would flatten the fit.
        let points: Vec<(f64, f64)> = env
            .iter()
            .take_while(|(_, m, se)| *m > 3.0 * se && *m > 1e-12 * scale)
            .map(|(t, m, _)| (*t, m.ln()))
            .collect();
        let b1 = model.op_b.smallest();
        if points.len() < 3 {
            // Signal already at the noise floor: fall back to the spectral gap.
            return Ok((budget.tail_tol.recip().ln() / b1).min(budget.max_horizon));
        }
        let fit = ols_slope(&points).expect("distinct lags");
        if fit.slope >= -1e-3 * b1 {
            return Err(Error::Horizon);
        }
        let rate = -fit.slope;
        let c = fit.intercept.exp().max(scale);
        let horizon = (c / (budget.tail_tol * scale)).ln() / rate;
        Ok(horizon.clamp(budget.dt, budget.max_horizon))
    }
}

/// Monte Carlo settings for the Feynman-Kac solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoissonBudget {
    pub replicas: usize,
    pub dt: f64,
    /// Truncate once the fitted envelope drops below `tail_tol * scale(phi)`.
    pub tail_tol: f64,
    pub max_horizon: f64,
    pub pilot_replicas: usize,
    /// Fixed truncation horizon; skips the pilot fit.
    pub horizon: Option<f64>,
    /// Skip the centering pre-test.
    pub waive_centering: bool,
    pub centering: ErgodicBudget,
    /// Relative finite-difference step for derivatives and residuals.
    pub fd_step: f64,
}

impl PoissonBudget {
    pub fn for_model(model: &ModelSpec) -> Self {
        let b1 = model.op_b.smallest();
        PoissonBudget {
            replicas: 1024,
            dt: 0.05 / b1,
            tail_tol: 1e-3,
            max_horizon: 40.0 / b1,
            pilot_replicas: 256,
            horizon: None,
            waive_centering: false,
            centering: ErgodicBudget::for_model(model),
            fd_step: 1e-2,
        }
    }

    pub fn with_replicas(mut self, m: usize) -> Self {
        self.replicas = m;
        self
    }

    pub fn with_horizon(mut self, t: f64) -> Self {
        self.horizon = Some(t);
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn waived(mut self) -> Self {
        self.waive_centering = true;
        self
    }

    fn validate(&self) -> Result<()> {
        check_positive("Poisson dt", self.dt)?;
        check_positive("tail tolerance", self.tail_tol)?;
        check_positive("maximum horizon", self.max_horizon)?;
        if self.replicas < 2 {
            return Err(Error::config("Poisson solver needs at least 2 replicas"));
        }
        if let Some(t) = self.horizon {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Domain {
                    parameter: "horizon",
                    value: t,
                    constraint: "truncation horizon must be finite and >= 0",
                });
            }
        }
        Ok(())
    }
}

/// `psi(x, y)` (or `Psi(x, y)` componentwise) with Monte Carlo error.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoissonSolution {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub horizon: f64,
    pub replicas: usize,
}

impl PoissonSolution {
    pub fn scalar(&self) -> f64 {
        self.value[0]
    }

    pub fn field(&self) -> SpectralField {
        SpectralField::slow(self.value.clone())
    }
}

/// Outcome of the centering test `int phi d mu^x = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenteringReport {
    pub bias: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pass: bool,
}

impl CenteringReport {
    /// The refusal error carrying the worst component.
    pub fn error(&self) -> Error {
        let (bias, stderr) = self
            .bias
            .iter()
            .zip(&self.stderr)
            .max_by(|a, b| {
                let ra = a.0.abs() / a.1.max(1e-300);
                let rb = b.0.abs() / b.1.max(1e-300);
                ra.total_cmp(&rb)
            })
            .map(|(b, s)| (*b, *s))
            .unwrap_or((0.0, 0.0));
        Error::Centering { bias, stderr }
    }
}

/// Ergodic average of `phi(x, .)`; passes when every component satisfies
/// `|bias| <= 3 SE`.
pub fn check_centering(
    problem: &PoissonProblem,
    x: &SpectralField,
    budget: &ErgodicBudget,
    seed: u64,
) -> Result<CenteringReport> {
    let model = &problem.model;
    model.check_state("centering slow state", x.coeffs())?;
    let mut rng = stream(seed, &[0x6365_6e74]);
    let (series, ..) = frozen_series(model, x.coeffs(), problem.observable(), budget, model.n(), &mut rng)?;
    let (bias, stderr) = series.batch_means(budget.batches);
    let pass = bias.iter().zip(&stderr).all(|(b, s)| b.abs() <= 3.0 * s);
    Ok(CenteringReport { bias, stderr, pass })
}

/// Per-replica trapezoid integrals `int_0^T phi(x, Y_t(y)) dt`, one row per
/// replica. Replica `i` uses the stream `(seed, i)` whatever `y` is, so
/// solves at perturbed `y` share noise.
fn replica_integrals(
    problem: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    horizon: f64,
    budget: &PoissonBudget,
    seed: u64,
) -> Result<SampleSeries> {
    let model = &problem.model;
    let dim = problem.dim();
    let n = model.n();
    let mut series = SampleSeries::with_capacity(dim, budget.replicas);
    if horizon == 0.0 {
        for _ in 0..budget.replicas {
            series.push(&vec![0.0; dim]);
        }
        return Ok(series);
    }
    let steps = (horizon / budget.dt).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let stepper = FrozenStepper::new(model, h);
    let rows: Vec<Result<Vec<f64>>> = (0..budget.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[r as u64]);
            let mut yy = y.to_vec();
            let mut scratch = FrozenScratch::new(n);
            let mut out = vec![0.0; dim];
            let mut acc = vec![0.0; dim];
            problem.observable.eval(x, &yy, &mut out);
            acc.iter_mut().zip(&out).for_each(|(a, v)| *a += 0.5 * v);
            for step in 1..=steps {
                stepper.step_rng(model, x, &mut yy, &mut scratch, &mut rng);
                if !yy.iter().all(|v| v.is_finite()) {
                    return Err(Error::Divergence { step });
                }
                problem.observable.eval(x, &yy, &mut out);
                let w = if step == steps { 0.5 } else { 1.0 };
                acc.iter_mut().zip(&out).for_each(|(a, v)| *a += w * v);
            }
            acc.iter_mut().for_each(|a| *a *= h);
            Ok(acc)
        })
        .collect();
    for r in rows {
        series.push(&r?);
    }
    Ok(series)
}

fn mean_and_se(series: &SampleSeries) -> (Vec<f64>, Vec<f64>) {
    let mean = series.mean();
    let m = series.len() as f64;
    let se = (0..series.dim())
        .map(|c| {
            let var = (0..series.len())
                .map(|i| (series.sample(i)[c] - mean[c]).powi(2))
                .sum::<f64>()
                / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();
    (mean, se)
}

fn prepare(
    problem: &PoissonProblem,
    x: &SpectralField,
    y: &SpectralField,
    budget: &PoissonBudget,
    seed: u64,
) -> Result<f64> {
    let model = &problem.model;
    model.check_state("Poisson slow state", x.coeffs())?;
    model.check_state("Poisson fast state", y.coeffs())?;
    budget.validate()?;
    let norm = y.norm();
    if norm > MAX_FAST_NORM {
        return Err(Error::Range { norm });
    }
    if !budget.waive_centering {
        let c = check_centering(problem, x, &budget.centering, derive_seed(seed, &[0x6365]))?;
        if !c.pass {
            return Err(c.error());
        }
    }
    match budget.horizon {
        Some(t) => Ok(t),
        None => problem.fit_horizon(x.coeffs(), y.coeffs(), budget, derive_seed(seed, &[0x686f])),
    }
}

/// Vector-valued solve: every component of `phi` is integrated along the
/// same fast paths.
pub fn solve_poisson_vector(
    problem: &PoissonProblem,
    x: &SpectralField,
    y: &SpectralField,
    budget: &PoissonBudget,
    seed: u64,
) -> Result<PoissonSolution> {
    let horizon = prepare(problem, x, y, budget, seed)?;
    let series = replica_integrals(problem, x.coeffs(), y.coeffs(), horizon, budget, seed)?;
    let (value, stderr) = mean_and_se(&series);
    Ok(PoissonSolution {
        value,
        stderr,
        horizon,
        replicas: budget.replicas,
    })
}

/// Scalar solve; `phi` must have dimension one.
pub fn solve_poisson(
    problem: &PoissonProblem,
    x: &SpectralField,
    y: &SpectralField,
    budget: &PoissonBudget,
    seed: u64,
) -> Result<PoissonSolution> {
    if problem.dim() != 1 {
        return Err(Error::config("solve_poisson needs a scalar observable"));
    }
    solve_poisson_vector(problem, x, y, budget, seed)
}

/// Directional derivative `D_y psi(x, y).k` with common random numbers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub horizon: f64,
    pub step: f64,
    /// Some nonzero component is within two standard errors of zero.
    pub noise_dominated: bool,
}

/// Central difference `(psi(y + s k) - psi(y - s k)) / (2 s)` with
/// `s = fd_step (1 + ||y||) / ||k||`; both solves share replica streams and
/// the truncation horizon.
pub fn estimate_dy_psi(
    problem: &PoissonProblem,
    x: &SpectralField,
    y: &SpectralField,
    k: &SpectralField,
    budget: &PoissonBudget,
    seed: u64,
) -> Result<DerivativeEstimate> {
    problem.model.check_state("derivative direction", k.coeffs())?;
    let dim = problem.dim();
    let kn = k.norm();
    if kn == 0.0 {
        return Ok(DerivativeEstimate {
            value: vec![0.0; dim],
            stderr: vec![0.0; dim],
            horizon: 0.0,
            step: 0.0,
            noise_dominated: false,
        });
    }
    let horizon = prepare(problem, x, y, budget, seed)?;
    let s = budget.fd_step * (1.0 + y.norm()) / kn;
    let yp: Vec<f64> = y.coeffs().iter().zip(k.coeffs()).map(|(a, b)| a + s * b).collect();
    let ym: Vec<f64> = y.coeffs().iter().zip(k.coeffs()).map(|(a, b)| a - s * b).collect();
    let ip = replica_integrals(problem, x.coeffs(), &yp, horizon, budget, seed)?;
    let im = replica_integrals(problem, x.coeffs(), &ym, horizon, budget, seed)?;
    let mut diff = SampleSeries::with_capacity(dim, ip.len());
    let mut row = vec![0.0; dim];
    for i in 0..ip.len() {
        for c in 0..dim {
            row[c] = (ip.sample(i)[c] - im.sample(i)[c]) / (2.0 * s);
        }
        diff.push(&row);
    }
    let (value, stderr) = mean_and_se(&diff);
    let noise_dominated = value
        .iter()
        .zip(&stderr)
        .any(|(v, se)| *se > 0.0 && v.abs() < 2.0 * se);
    Ok(DerivativeEstimate {
        value,
        stderr,
        horizon,
        step: s,
        noise_dominated,
    })
}

/// Finite-difference generator residual of a candidate solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `|L2 psi + phi| / (1 + |phi|)` at step `h`.
    pub residual: f64,
    /// Same quantity at step `2h`.
    pub residual_coarse: f64,
    pub generator: f64,
    pub phi: f64,
    /// Modes whose second-derivative term cleared the round-off floor.
    pub active_modes: usize,
    /// The two step sizes disagree by more than half the residual: the
    /// finite differences are resolving noise, not the generator.
    pub noise_dominated: bool,
}

impl ResidualReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.residual < tol && !self.noise_dominated
    }
}

/// `L2 psi = <B y + G(x, y), D_y psi> + 1/2 sum_k lambda_{2,k} d^2_k psi` by
/// central differences on the Galerkin modes; `psi` is a black box (for a
/// Monte Carlo solution it should reuse a fixed seed so all evaluations
/// share noise).
pub fn poisson_residual(
    problem: &PoissonProblem,
    psi: &dyn Fn(&[f64]) -> Result<f64>,
    x: &SpectralField,
    y: &SpectralField,
    h: f64,
) -> Result<ResidualReport> {
    check_positive("residual FD step", h)?;
    if problem.dim() != 1 {
        return Err(Error::config("poisson_residual needs a scalar observable"));
    }
    let model = &problem.model;
    model.check_state("residual slow state", x.coeffs())?;
    model.check_state("residual fast state", y.coeffs())?;
    let mut phi = [0.0];
    problem.observable.eval(x.coeffs(), y.coeffs(), &mut phi);
    let fine = generator_fd(problem, psi, x.coeffs(), y.coeffs(), h)?;
    let coarse = generator_fd(problem, psi, x.coeffs(), y.coeffs(), 2.0 * h)?;
    let rel = |g: f64| (g + phi[0]).abs() / (1.0 + phi[0].abs());
    let residual = rel(fine.0);
    let residual_coarse = rel(coarse.0);
    let noise_dominated = (residual - residual_coarse).abs() > 0.5 * residual.max(residual_coarse).max(1e-6);
    Ok(ResidualReport {
        residual,
        residual_coarse,
        generator: fine.0,
        phi: phi[0],
        active_modes: fine.1,
        noise_dominated,
    })
}

fn generator_fd(
    problem: &PoissonProblem,
    psi: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    y: &[f64],
    h: f64,
) -> Result<(f64, usize)> {
    let model = &problem.model;
    let n = model.n();
    let mut g = vec![0.0; n];
    model.g.evaluate(x, y, &mut g);
    let p0 = psi(y)?;
    let floor = 64.0 * f64::EPSILON * (1.0 + p0.abs()) / (h * h);
    let mut yy = y.to_vec();
    let mut total = 0.0;
    let mut active = 0;
    for k in 0..n {
        yy[k] = y[k] + h;
        let pp = psi(&yy)?;
        yy[k] = y[k] - h;
        let pm = psi(&yy)?;
        yy[k] = y[k];
        let d1 = (pp - pm) / (2.0 * h);
        let d2 = (pp - 2.0 * p0 + pm) / (h * h);
        let beta = model.op_b.eigenvalues()[k];
        total += (-beta * y[k] + g[k]) * d1;
        if model.fast_noise && d2.abs() > floor {
            total += 0.5 * model.q2.variances()[k] * d2;
            active += 1;
        }
    }
    Ok((total, active))
}
