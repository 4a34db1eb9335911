//! Exponential-Euler time stepping for the coupled slow-fast system, the
//! frozen fast equation and the averaged slow equation.
//!
//! Linear parts and additive noise are integrated exactly per eigenmode; the
//! reaction terms are frozen at the left endpoint of each step. The fast
//! equation uses the effective step `dt / eps`, so the scheme stays stable
//! for `beta_k dt >> eps`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{check_positive, Error, Result};
use crate::models::ModelSpec;
use crate::rng::{derive_seed, fill_normals};
use crate::spectral::{weighted_norm_sq, OuStep, Space, SpectralField};

/// Source of the averaged drift `F_bar(x)`.
pub trait AveragedDrift: Send + Sync {
    fn fbar(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Evaluation tied to an external key (path and step) instead of the
    /// state. Stochastic providers seed from `key`, so runs that share keys
    /// share estimator noise. Defaults to [`AveragedDrift::fbar`].
    fn fbar_keyed(&self, x: &[f64], _key: u64, out: &mut [f64]) -> Result<()> {
        self.fbar(x, out)
    }
}

/// Wraps a closure as an [`AveragedDrift`].
pub struct FnDrift<F>(pub F);

impl<F> AveragedDrift for FnDrift<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn fbar(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(x, out);
        Ok(())
    }
}

/// `F_bar(x) = F(x, 0)`, exact when `F` does not depend on the fast variable.
pub struct SlowMapDrift {
    model: ModelSpec,
}

impl SlowMapDrift {
    pub fn new(model: &ModelSpec) -> Self {
        SlowMapDrift {
            model: model.clone(),
        }
    }
}

impl AveragedDrift for SlowMapDrift {
    fn fbar(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let zero = vec![0.0; self.model.n()];
        self.model.f.evaluate(x, &zero, out);
        Ok(())
    }
}

/// State of the coupled system at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub t: f64,
    pub x: SpectralField,
    pub y: SpectralField,
}

impl CoupledState {
    pub fn new(x: SpectralField, y: SpectralField) -> Self {
        CoupledState { t: 0.0, x, y }
    }
}

/// Largest step for which the fast drift-freezing error stays comparable to
/// one relaxation time of the slowest fast mode.
pub fn recommended_dt(model: &ModelSpec, eps: f64) -> f64 {
    eps / (4.0 * model.op_b.smallest())
}

/// Default macro step `min(eps / 4, 2^-8 T)`.
pub fn default_dt(eps: f64, horizon: f64) -> f64 {
    (eps / 4.0).min(horizon / 256.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Domain {
            parameter: "eps",
            value: eps,
            constraint: "time-scale separation must lie in (0, 1]",
        });
    }
    Ok(())
}

/// Cached per-mode factors for repeated coupled steps at fixed `(eps, dt)`.
pub(crate) struct SlowFastStepper {
    slow: OuStep,
    fast: OuStep,
    n: usize,
}

impl SlowFastStepper {
    pub fn new(model: &ModelSpec, eps: f64, dt: f64) -> Result<Self> {
        check_eps(eps)?;
        check_positive("dt", dt)?;
        let slow = OuStep::new(
            model.op_a.eigenvalues(),
            model.slow_noise.then(|| model.q1.variances()),
            dt,
        );
        let fast = OuStep::new(
            model.op_b.eigenvalues(),
            model.fast_noise.then(|| model.q2.variances()),
            dt / eps,
        );
        Ok(SlowFastStepper {
            slow,
            fast,
            n: model.n(),
        })
    }

    pub fn slow(&self) -> &OuStep {
        &self.slow
    }

    /// Advances `(x, y)` in place. `xi1`, `xi2` hold at least `n` standard
    /// normals; the slow stochastic convolution is written to `w1`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        model: &ModelSpec,
        x: &mut [f64],
        y: &mut [f64],
        xi1: &[f64],
        xi2: &[f64],
        w1: &mut [f64],
        scratch: &mut StepScratch,
    ) {
        let n = self.n;
        model.f.evaluate(x, y, &mut scratch.fx);
        model.g.evaluate(x, y, &mut scratch.gy);
        self.slow.convolution(&xi1[..n], w1);
        self.fast.convolution(&xi2[..n], &mut scratch.w2);
        self.slow.advance(x, &scratch.fx, w1);
        self.fast.advance(y, &scratch.gy, &scratch.w2);
    }
}

pub(crate) struct StepScratch {
    pub fx: Vec<f64>,
    pub gy: Vec<f64>,
    pub w2: Vec<f64>,
}

impl StepScratch {
    pub fn new(n: usize) -> Self {
        StepScratch {
            fx: vec![0.0; n],
            gy: vec![0.0; n],
            w2: vec![0.0; n],
        }
    }
}

/// One coupled step. Returns the new state and the slow stochastic
/// convolution increment that was used, for replay in the averaged equation.
pub fn step_slow_fast<R: Rng + ?Sized>(
    model: &ModelSpec,
    eps: f64,
    dt: f64,
    state: &CoupledState,
    rng: &mut R,
) -> Result<(CoupledState, SpectralField)> {
    model.check_state("slow state", state.x.coeffs())?;
    model.check_state("fast state", state.y.coeffs())?;
    let stepper = SlowFastStepper::new(model, eps, dt)?;
    let n = model.n();
    let mut xi = vec![0.0; 2 * n];
    fill_normals(rng, &mut xi);
    let mut x = state.x.clone();
    let mut y = state.y.clone();
    let mut w1 = vec![0.0; n];
    let mut scratch = StepScratch::new(n);
    stepper.step(
        model,
        x.coeffs_mut(),
        y.coeffs_mut(),
        &xi[..n],
        &xi[n..],
        &mut w1,
        &mut scratch,
    );
    Ok((
        CoupledState {
            t: state.t + dt,
            x,
            y,
        },
        SpectralField::slow(w1),
    ))
}

/// One step of the frozen equation `dY = (BY + G(x, Y)) dt + dW2` with `x`
/// held fixed.
pub fn step_frozen<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &SpectralField,
    dt: f64,
    y: &SpectralField,
    rng: &mut R,
) -> Result<SpectralField> {
    check_positive("dt", dt)?;
    model.check_state("frozen slow state", x.coeffs())?;
    model.check_state("frozen fast state", y.coeffs())?;
    let stepper = FrozenStepper::new(model, dt);
    let mut out = y.clone();
    let mut scratch = FrozenScratch::new(model.n());
    fill_normals(rng, &mut scratch.xi);
    stepper.step(model, x.coeffs(), out.coeffs_mut(), &mut scratch);
    Ok(out)
}

pub(crate) struct FrozenStepper {
    fast: OuStep,
}

pub(crate) struct FrozenScratch {
    pub g: Vec<f64>,
    pub xi: Vec<f64>,
    pub conv: Vec<f64>,
}

impl FrozenScratch {
    pub fn new(n: usize) -> Self {
        Self::with_noise_dim(n, n)
    }

    /// Draws `noise_dim >= n` normals per step and uses the first `n`.
    pub fn with_noise_dim(n: usize, noise_dim: usize) -> Self {
        FrozenScratch {
            g: vec![0.0; n],
            xi: vec![0.0; noise_dim.max(n)],
            conv: vec![0.0; n],
        }
    }
}

impl FrozenStepper {
    pub fn new(model: &ModelSpec, dt: f64) -> Self {
        FrozenStepper {
            fast: OuStep::new(
                model.op_b.eigenvalues(),
                model.fast_noise.then(|| model.q2.variances()),
                dt,
            ),
        }
    }

    /// Advances `y` using the normals already stored in `scratch.xi`.
    pub fn step(&self, model: &ModelSpec, x: &[f64], y: &mut [f64], scratch: &mut FrozenScratch) {
        model.g.evaluate(x, y, &mut scratch.g);
        self.fast.convolution(&scratch.xi, &mut scratch.conv);
        self.fast.advance(y, &scratch.g, &scratch.conv);
    }

    /// Draws fresh normals and advances `y`.
    pub fn step_rng<R: Rng + ?Sized>(
        &self,
        model: &ModelSpec,
        x: &[f64],
        y: &mut [f64],
        scratch: &mut FrozenScratch,
        rng: &mut R,
    ) {
        fill_normals(rng, &mut scratch.xi);
        self.step(model, x, y, scratch);
    }
}

/// One exponential-Euler step of the averaged equation, reusing the slow
/// stochastic convolution `w1` (from a coupled run, or freshly sampled).
pub fn step_averaged(
    model: &ModelSpec,
    drift: &dyn AveragedDrift,
    dt: f64,
    x: &SpectralField,
    w1: &SpectralField,
) -> Result<SpectralField> {
    check_positive("dt", dt)?;
    model.check_state("averaged state", x.coeffs())?;
    model.check_state("slow noise increment", w1.coeffs())?;
    let step = OuStep::new(model.op_a.eigenvalues(), None, dt);
    let mut fbar = vec![0.0; model.n()];
    drift.fbar(x.coeffs(), &mut fbar)?;
    let mut out = x.clone();
    step.advance(out.coeffs_mut(), &fbar, w1.coeffs());
    Ok(out)
}

/// Samples the slow stochastic convolution over one step (the `w1` argument
/// of [`step_averaged`] for standalone runs).
pub fn sample_slow_convolution<R: Rng + ?Sized>(
    model: &ModelSpec,
    dt: f64,
    rng: &mut R,
) -> Result<SpectralField> {
    check_positive("dt", dt)?;
    let step = OuStep::new(
        model.op_a.eigenvalues(),
        model.slow_noise.then(|| model.q1.variances()),
        dt,
    );
    let mut xi = vec![0.0; model.n()];
    fill_normals(rng, &mut xi);
    let mut conv = vec![0.0; model.n()];
    step.convolution(&xi, &mut conv);
    Ok(SpectralField::slow(conv))
}

/// Replays the averaged equation against a recorded sequence of slow noise
/// increments.
pub fn replay_averaged(
    model: &ModelSpec,
    drift: &dyn AveragedDrift,
    dt: f64,
    x0: &SpectralField,
    record: &[SpectralField],
) -> Result<Vec<SpectralField>> {
    let mut path = Vec::with_capacity(record.len() + 1);
    let mut x = x0.clone();
    path.push(x.clone());
    for w in record {
        x = step_averaged(model, drift, dt, &x, w)?;
        path.push(x.clone());
    }
    Ok(path)
}

/// Standalone averaged path with fresh slow noise, recorded at every step.
pub fn simulate_averaged<R: Rng + ?Sized>(
    model: &ModelSpec,
    drift: &dyn AveragedDrift,
    horizon: f64,
    dt: f64,
    x0: &SpectralField,
    rng: &mut R,
) -> Result<Vec<SpectralField>> {
    let steps = step_count(horizon, dt)?;
    model.check_state("averaged initial state", x0.coeffs())?;
    let n = model.n();
    let slow = OuStep::new(
        model.op_a.eigenvalues(),
        model.slow_noise.then(|| model.q1.variances()),
        dt,
    );
    let mut x = x0.clone();
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x.clone());
    let mut xi = vec![0.0; n];
    let mut conv = vec![0.0; n];
    let mut fbar = vec![0.0; n];
    for step in 0..steps {
        fill_normals(rng, &mut xi);
        slow.convolution(&xi, &mut conv);
        drift.fbar(x.coeffs(), &mut fbar)?;
        slow.advance(x.coeffs_mut(), &fbar, &conv);
        if !x.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }
        path.push(x.clone());
    }
    Ok(path)
}

/// Number of macro steps covering `[0, horizon]`; `dt` must divide the
/// horizon up to rounding.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    check_positive("T", horizon)?;
    check_positive("dt", dt)?;
    let steps = (horizon / dt).round();
    if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::config(format!(
            "dt = {dt} does not divide the horizon T = {horizon}"
        )));
    }
    Ok(steps as usize)
}

/// Which grid points are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputTimes {
    EveryStep,
    /// `k` equispaced times including `0` and `T`, snapped to the step grid.
    Equispaced(usize),
}

impl OutputTimes {
    fn indices(&self, steps: usize) -> Vec<usize> {
        match *self {
            OutputTimes::EveryStep => (0..=steps).collect(),
            OutputTimes::Equispaced(k) if k >= 2 => {
                let mut idx: Vec<usize> = (0..k)
                    .map(|i| ((i as f64) * steps as f64 / (k - 1) as f64).round() as usize)
                    .collect();
                idx.dedup();
                idx
            }
            OutputTimes::Equispaced(_) => vec![steps],
        }
    }
}

/// Accumulate `int_s^T e^{(T-r)A} delta F(X_r, Y_r) dr` along the coupled
/// path, starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluctuationWindow {
    pub start: f64,
}

#[derive(Clone)]
pub struct SimOptions {
    pub x0: SpectralField,
    pub y0: SpectralField,
    pub output: OutputTimes,
    /// Fractional-norm exponents for the recorded distances to the averaged path.
    pub gammas: Vec<f64>,
    /// Averaged drift; `None` skips the averaged path.
    pub averaged: Option<Arc<dyn AveragedDrift>>,
    pub fluctuation: Option<FluctuationWindow>,
    /// Standard normals drawn per step for each noise (`>= n`). Drawing at a
    /// common dimension couples runs at different Galerkin levels.
    pub noise_dim: usize,
    pub record_fast: bool,
    pub record_noise: bool,
    /// Maximum number of stored `f64` values.
    pub memory_budget: usize,
    /// When set, the averaged drift is queried through
    /// [`AveragedDrift::fbar_keyed`] with keys derived from this value and
    /// the step index.
    pub drift_key: Option<u64>,
}

impl SimOptions {
    pub fn new(x0: SpectralField, y0: SpectralField) -> Self {
        let n = x0.len();
        SimOptions {
            x0,
            y0,
            output: OutputTimes::Equispaced(17),
            gammas: Vec::new(),
            averaged: None,
            fluctuation: None,
            noise_dim: n,
            record_fast: false,
            record_noise: false,
            memory_budget: 64 << 20,
            drift_key: None,
        }
    }

    pub fn with_averaged(mut self, drift: Arc<dyn AveragedDrift>) -> Self {
        self.averaged = Some(drift);
        self
    }

    pub fn with_gammas(mut self, gammas: &[f64]) -> Self {
        self.gammas = gammas.to_vec();
        self
    }

    pub fn with_output(mut self, output: OutputTimes) -> Self {
        self.output = output;
        self
    }

    pub fn with_drift_key(mut self, key: u64) -> Self {
        self.drift_key = Some(key);
        self
    }
}

/// Slow, fast and averaged trajectories driven by one realisation of the
/// slow noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub eps: f64,
    pub dt: f64,
    pub steps: usize,
    pub times: Vec<f64>,
    pub slow: Vec<SpectralField>,
    /// Empty unless `record_fast`.
    pub fast: Vec<SpectralField>,
    /// Empty when no averaged drift was supplied.
    pub averaged: Vec<SpectralField>,
    /// Slow stochastic convolution per step; empty unless `record_noise`.
    pub noise_record: Vec<SpectralField>,
    pub gammas: Vec<f64>,
    /// `distances[g][i] = ||(-A)^gamma_g (X_t - X_bar_t)||^2` at output time `i`.
    pub distances: Vec<Vec<f64>>,
    /// Path-wise `sup_t ||(-A)^gamma_g (X_t - X_bar_t)||` over the full step grid.
    pub sup_distance: Vec<f64>,
    /// Accumulated fluctuation integral at time `T`, when requested.
    pub fluctuation: Option<SpectralField>,
    /// `dt` exceeded the recommended bound for this `eps`.
    pub dt_warning: bool,
}

impl PathBundle {
    pub fn terminal_slow(&self) -> &SpectralField {
        self.slow.last().expect("bundle has at least one output")
    }

    pub fn terminal_averaged(&self) -> Option<&SpectralField> {
        self.averaged.last()
    }
}

/// Advances the coupled system and (optionally) the averaged equation on one
/// grid with shared slow noise.
pub fn simulate_bundle<R: Rng + ?Sized>(
    model: &ModelSpec,
    eps: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
    options: &SimOptions,
) -> Result<PathBundle> {
    let n = model.n();
    model.check_state("initial slow state", options.x0.coeffs())?;
    model.check_state("initial fast state", options.y0.coeffs())?;
    if options.noise_dim < n {
        return Err(Error::config(format!(
            "noise dimension {} below Galerkin level {n}",
            options.noise_dim
        )));
    }
    for &g in &options.gammas {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Domain {
                parameter: "gamma",
                value: g,
                constraint: "fractional power must lie in [0, 1]",
            });
        }
    }
    if options.fluctuation.is_some() && options.averaged.is_none() {
        return Err(Error::config("fluctuation integral needs an averaged drift"));
    }
    let steps = step_count(horizon, dt)?;
    let stepper = SlowFastStepper::new(model, eps, dt)?;
    let out_idx = options.output.indices(steps);

    let series = 1
        + usize::from(options.record_fast)
        + usize::from(options.averaged.is_some());
    let requested = n * out_idx.len() * series
        + if options.record_noise { n * steps } else { 0 };
    if requested > options.memory_budget {
        return Err(Error::MemoryBudget {
            requested,
            budget: options.memory_budget,
        });
    }

    let eigs = model.op_a.eigenvalues();
    let mut x = options.x0.clone();
    let mut y = options.y0.clone();
    let mut xbar = options.averaged.as_ref().map(|_| options.x0.clone());
    let mut fbar = vec![0.0; n];
    let mut xi = vec![0.0; 2 * options.noise_dim];
    let mut w1 = vec![0.0; n];
    let mut scratch = StepScratch::new(n);
    let mut fluct = options.fluctuation.map(|_| vec![0.0; n]);
    let mut diff = vec![0.0; n];
    let mut f_at_x = vec![0.0; n];
    let mut fbar_at_x = vec![0.0; n];

    let mut bundle = PathBundle {
        eps,
        dt,
        steps,
        times: Vec::with_capacity(out_idx.len()),
        slow: Vec::with_capacity(out_idx.len()),
        fast: Vec::new(),
        averaged: Vec::new(),
        noise_record: Vec::new(),
        gammas: options.gammas.clone(),
        distances: vec![Vec::with_capacity(out_idx.len()); options.gammas.len()],
        sup_distance: vec![0.0; options.gammas.len()],
        fluctuation: None,
        dt_warning: dt > recommended_dt(model, eps) * (1.0 + 1e-12),
    };

    let mut next_out = 0;
    let record = |step: usize,
                      x: &SpectralField,
                      y: &SpectralField,
                      xbar: Option<&SpectralField>,
                      bundle: &mut PathBundle,
                      next_out: &mut usize,
                      diff: &mut [f64]| {
        if let Some(xb) = xbar {
            for k in 0..n {
                diff[k] = x.coeffs()[k] - xb.coeffs()[k];
            }
            for (g, &gamma) in options.gammas.iter().enumerate() {
                let d2 = weighted_norm_sq(eigs, gamma, diff);
                bundle.sup_distance[g] = bundle.sup_distance[g].max(d2.sqrt());
                if *next_out < out_idx.len() && out_idx[*next_out] == step {
                    bundle.distances[g].push(d2);
                }
            }
        }
        if *next_out < out_idx.len() && out_idx[*next_out] == step {
            bundle.times.push(step as f64 * dt);
            bundle.slow.push(x.clone());
            if options.record_fast {
                bundle.fast.push(y.clone());
            }
            if let Some(xb) = xbar {
                bundle.averaged.push(xb.clone());
            }
            *next_out += 1;
        }
    };

    record(0, &x, &y, xbar.as_ref(), &mut bundle, &mut next_out, &mut diff);
    let window_start = options.fluctuation.map(|w| w.start).unwrap_or(0.0);

    for step in 0..steps {
        let t = step as f64 * dt;
        fill_normals(rng, &mut xi);
        let (xi1, xi2) = xi.split_at(options.noise_dim);

        if let (Some(j), Some(drift)) = (fluct.as_mut(), options.averaged.as_ref()) {
            if t + 1e-12 * dt >= window_start {
                model.f.evaluate(x.coeffs(), y.coeffs(), &mut f_at_x);
                query(drift.as_ref(), options.drift_key, step, 1, x.coeffs(), &mut fbar_at_x)?;
                let s = stepper.slow();
                for k in 0..n {
                    j[k] = s.decay[k] * j[k] + s.gain[k] * (f_at_x[k] - fbar_at_x[k]);
                }
            }
        }

        if let (Some(xb), Some(drift)) = (xbar.as_mut(), options.averaged.as_ref()) {
            query(drift.as_ref(), options.drift_key, step, 0, xb.coeffs(), &mut fbar)?;
        }
        stepper.step(
            model,
            x.coeffs_mut(),
            y.coeffs_mut(),
            xi1,
            xi2,
            &mut w1,
            &mut scratch,
        );
        if let Some(xb) = xbar.as_mut() {
            stepper.slow().advance(xb.coeffs_mut(), &fbar, &w1);
        }
        if options.record_noise {
            bundle.noise_record.push(SpectralField::slow(w1.clone()));
        }
        if !x.is_finite() || !y.is_finite() || xbar.as_ref().is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        record(step + 1, &x, &y, xbar.as_ref(), &mut bundle, &mut next_out, &mut diff);
    }

    bundle.fluctuation = fluct.map(SpectralField::slow);
    Ok(bundle)
}

fn query(
    drift: &dyn AveragedDrift,
    key: Option<u64>,
    step: usize,
    slot: u64,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    match key {
        Some(k) => drift.fbar_keyed(x, derive_seed(k, &[step as u64, slot]), out),
        None => drift.fbar(x, out),
    }
}

/// Convenience initial condition: `x0 = 0`, `y0 = 0`.
pub fn zero_state(n: usize) -> (SpectralField, SpectralField) {
    (SpectralField::zeros(Space::Slow, n), SpectralField::zeros(Space::Fast, n))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{linear_bench, ZeroMap};
    use crate::rng::stream;
    use nalgebra::DMatrix;

    fn silent_zero_model(n: usize) -> ModelSpec {
        let b = linear_bench(n, &[], DMatrix::zeros(n, n), &vec![0.0; n]).unwrap();
        b.model()
            .clone()
            .with_maps(Arc::new(ZeroMap { dim: n }), Arc::new(ZeroMap { dim: n }))
            .unwrap()
            .with_noise(false, false)
    }

    #[test]
    fn pure_linear_decay() {
        let m = silent_zero_model(3);
        let s = CoupledState::new(
            SpectralField::slow(vec![1.0, 1.0, 1.0]),
            SpectralField::fast(vec![1.0, 1.0, 1.0]),
        );
        let (dt, eps) = (0.01, 0.25);
        let mut rng = stream(0, &[]);
        let (next, w1) = step_slow_fast(&m, eps, dt, &s, &mut rng).unwrap();
        for k in 0..3 {
            let a = ((k + 1) * (k + 1)) as f64;
            assert!((next.x.coeffs()[k] - (-a * dt).exp()).abs() < 1e-15);
            assert!((next.y.coeffs()[k] - (-a * dt / eps).exp()).abs() < 1e-15);
        }
        assert!(w1.coeffs().iter().all(|v| *v == 0.0));
        assert!((next.t - dt).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = silent_zero_model(2);
        let (x, y) = zero_state(2);
        let s = CoupledState::new(x, y);
        let mut rng = stream(0, &[]);
        assert!(step_slow_fast(&m, 0.5, 0.0, &s, &mut rng).is_err());
        assert!(step_slow_fast(&m, 0.0, 0.1, &s, &mut rng).is_err());
        assert!(step_slow_fast(&m, 1.5, 0.1, &s, &mut rng).is_err());
        assert!(step_count(1.0, 0.3).is_err());
        assert_eq!(step_count(1.0, 0.25).unwrap(), 4);
    }

    #[test]
    fn averaged_step_without_drift_or_noise_is_the_semigroup() {
        let m = silent_zero_model(2);
        let zero = FnDrift(|_: &[f64], out: &mut [f64]| out.fill(0.0));
        let x = SpectralField::slow(vec![1.0, 2.0]);
        let w = SpectralField::slow(vec![0.0, 0.0]);
        let out = step_averaged(&m, &zero, 0.1, &x, &w).unwrap();
        assert!((out.coeffs()[0] - (-0.1f64).exp()).abs() < 1e-15);
        assert!((out.coeffs()[1] - 2.0 * (-0.4f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn frozen_step_is_deterministic_per_seed() {
        let b = linear_bench(4, &[1.0], DMatrix::identity(4, 4), &[0.0; 4]).unwrap();
        let x = SpectralField::slow(vec![0.5; 4]);
        let mut y1 = SpectralField::fast(vec![0.0; 4]);
        let mut y2 = y1.clone();
        let mut r1 = stream(3, &[]);
        let mut r2 = stream(3, &[]);
        for _ in 0..50 {
            y1 = step_frozen(b.model(), &x, 0.1, &y1, &mut r1).unwrap();
            y2 = step_frozen(b.model(), &x, 0.1, &y2, &mut r2).unwrap();
        }
        assert_eq!(y1, y2);
    }

    #[test]
    fn smoke_bundle_every_step() {
        let b = linear_bench(4, &[1.0], DMatrix::zeros(4, 4), &[0.0; 4]).unwrap();
        let (x0, y0) = zero_state(4);
        let drift: Arc<dyn AveragedDrift> = {
            let bench = b.clone();
            Arc::new(FnDrift(move |x: &[f64], out: &mut [f64]| out.copy_from_slice(&bench.fbar(x))))
        };
        let opts = SimOptions::new(x0, y0)
            .with_averaged(drift)
            .with_gammas(&[0.0, 0.25])
            .with_output(OutputTimes::EveryStep);
        let dt = 1.0 / 64.0;
        let bundle = simulate_bundle(b.model(), 1.0, 1.0, dt, &mut stream(1, &[]), &opts).unwrap();
        assert_eq!(bundle.times.len(), 65);
        assert_eq!(bundle.slow.len(), 65);
        assert_eq!(bundle.averaged.len(), 65);
        assert!(bundle.slow.iter().all(|s| s.is_finite()));
        for i in 0..65 {
            assert!(bundle.distances[1][i] >= bundle.distances[0][i]);
        }
        assert!(bundle.sup_distance[1] >= bundle.sup_distance[0]);
    }

    #[test]
    fn memory_guard_trips() {
        let b = linear_bench(4, &[], DMatrix::zeros(4, 4), &[0.0; 4]).unwrap();
        let (x0, y0) = zero_state(4);
        let mut opts = SimOptions::new(x0, y0).with_output(OutputTimes::EveryStep);
        opts.memory_budget = 100;
        let r = simulate_bundle(b.model(), 0.5, 1.0, 1.0 / 64.0, &mut stream(1, &[]), &opts);
        assert!(matches!(r, Err(Error::MemoryBudget { .. })));
    }
}
