//! Ergodic estimation under the frozen invariant measure `mu^x`: the averaged
//! drift, the centred slow drift `delta F`, mixing diagnostics and the first
//! derivative of the averaged drift.
//!
//! `mu^x` is only ever used through a sampler: a long path of the frozen
//! equation started at `y = 0`, with a burn-in segment discarded and the
//! remainder thinned and batched.

use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_positive, Error, Result};
use crate::integrators::{AveragedDrift, FrozenScratch, FrozenStepper};
use crate::models::{directional_derivative, Argument, LinearBench, ModelSpec};
use crate::poisson::{check_centering, estimate_dy_psi, PoissonBudget, PoissonProblem};
use crate::rng::{derive_seed, fill_normals, stream};
use crate::spectral::SpectralField;
use crate::stats::{ols_slope, SampleSeries};

/// Function of `(x, y)` averaged against `mu^x` or integrated along the
/// frozen flow.
pub trait Observable: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Polynomial growth degree in `y`.
    fn growth_degree(&self) -> u32 {
        1
    }
}

/// Closure-backed observable.
pub struct FnObservable<F> {
    dim: usize,
    f: F,
}

impl<F> FnObservable<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnObservable { dim, f }
    }
}

impl<F> Observable for FnObservable<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out)
    }
}

/// The slow reaction map `F(x, y)` itself.
struct SlowMap<'a>(&'a ModelSpec);

impl Observable for SlowMap<'_> {
    fn dim(&self) -> usize {
        self.0.n()
    }

    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.0.f.evaluate(x, y, out)
    }
}

/// `delta F(x, y) = F(x, y) - F_bar(x)` with `F_bar` evaluated once, at the
/// slow state the observable was built for.
#[derive(Clone)]
pub struct DeltaF {
    model: ModelSpec,
    x: Vec<f64>,
    fbar: Vec<f64>,
}

impl DeltaF {
    pub fn new(model: &ModelSpec, provider: &dyn AveragedDrift, x: &[f64]) -> Result<Self> {
        model.check_state("delta F slow state", x)?;
        let mut fbar = vec![0.0; model.n()];
        provider.fbar(x, &mut fbar)?;
        Ok(DeltaF {
            model: model.clone(),
            x: x.to_vec(),
            fbar,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn fbar(&self) -> &[f64] {
        &self.fbar
    }
}

impl Observable for DeltaF {
    fn dim(&self) -> usize {
        self.model.n()
    }

    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x, &self.x[..]);
        self.model.f.evaluate(x, y, out);
        for (o, f) in out.iter_mut().zip(&self.fbar) {
            *o -= f;
        }
    }

    fn growth_degree(&self) -> u32 {
        self.model.f.meta().growth_degree
    }
}

/// Run lengths of one ergodic average, in fast time units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErgodicBudget {
    pub burn_in: f64,
    pub sample_time: f64,
    pub dt: f64,
    /// Time between retained samples.
    pub thinning: f64,
    pub batches: usize,
}

impl ErgodicBudget {
    /// Burn-in `8 / beta_1`, thinning `1 / beta_1`, `128 / beta_1` of
    /// sampling on a step of `1 / (4 beta_1)`.
    pub fn for_model(model: &ModelSpec) -> Self {
        let b1 = model.op_b.smallest();
        ErgodicBudget {
            burn_in: 8.0 / b1,
            sample_time: 128.0 / b1,
            dt: 0.25 / b1,
            thinning: 1.0 / b1,
            batches: 32,
        }
    }

    pub fn with_sample_time(mut self, t: f64) -> Self {
        self.sample_time = t;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_burn_in(mut self, t: f64) -> Self {
        self.burn_in = t;
        self
    }

    /// `(burn-in steps, sample steps, thinning steps)`.
    fn steps(&self, model: &ModelSpec) -> Result<(usize, usize, usize)> {
        check_positive("burn-in time", self.burn_in)?;
        check_positive("sample time", self.sample_time)?;
        check_positive("ergodic dt", self.dt)?;
        check_positive("thinning", self.thinning)?;
        let floor = 8.0 / model.op_b.smallest();
        if self.sample_time < 10.0 * floor * (1.0 - 1e-12) {
            return Err(Error::config(format!(
                "sample time {} is below 10 x the burn-in floor {floor}",
                self.sample_time
            )));
        }
        let burn = (self.burn_in / self.dt).ceil() as usize;
        let sample = (self.sample_time / self.dt).ceil() as usize;
        let thin = ((self.thinning / self.dt).round() as usize).max(1);
        Ok((burn, sample, thin))
    }
}

/// Mean of an observable under `mu^x` with batch-means standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErgodicEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub burn_in_steps: usize,
    pub sample_steps: usize,
    /// Steps between retained samples.
    pub thinning: usize,
    pub samples: usize,
}

impl ErgodicEstimate {
    pub fn field(&self) -> SpectralField {
        SpectralField::slow(self.value.clone())
    }

    fn exact(value: Vec<f64>) -> Self {
        let n = value.len();
        ErgodicEstimate {
            value,
            stderr: vec![0.0; n],
            burn_in_steps: 0,
            sample_steps: 0,
            thinning: 0,
            samples: 0,
        }
    }
}

/// Runs the frozen chain at `x` from `y = 0` and records `obs` at the
/// thinned sample times.
pub(crate) fn frozen_series<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &[f64],
    obs: &dyn Observable,
    budget: &ErgodicBudget,
    noise_dim: usize,
    rng: &mut R,
) -> Result<(SampleSeries, usize, usize, usize)> {
    let (burn, sample, thin) = budget.steps(model)?;
    let n = model.n();
    let stepper = FrozenStepper::new(model, budget.dt);
    let mut scratch = FrozenScratch::with_noise_dim(n, noise_dim);
    let mut y = vec![0.0; n];
    let mut out = vec![0.0; obs.dim()];
    let mut series = SampleSeries::with_capacity(obs.dim(), sample / thin + 1);
    for step in 1..=burn + sample {
        stepper.step_rng(model, x, &mut y, &mut scratch, rng);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        if step > burn && (step - burn) % thin == 0 {
            obs.eval(x, &y, &mut out);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step });
            }
            series.push(&out);
        }
    }
    Ok((series, burn, sample, thin))
}

/// Ergodic average of `obs(x, .)` under `mu^x`.
pub fn ergodic_average<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &SpectralField,
    obs: &dyn Observable,
    budget: &ErgodicBudget,
    rng: &mut R,
) -> Result<ErgodicEstimate> {
    model.check_state("ergodic slow state", x.coeffs())?;
    let (series, burn, sample, thin) =
        frozen_series(model, x.coeffs(), obs, budget, model.n(), rng)?;
    let (value, stderr) = series.batch_means(budget.batches);
    Ok(ErgodicEstimate {
        value,
        stderr,
        burn_in_steps: burn,
        sample_steps: sample,
        thinning: thin,
        samples: series.len(),
    })
}

/// `F_bar(x) = int F(x, y) mu^x(dy)`. Exact when `F` ignores `y`.
pub fn estimate_fbar<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &SpectralField,
    budget: &ErgodicBudget,
    rng: &mut R,
) -> Result<ErgodicEstimate> {
    model.check_state("F_bar slow state", x.coeffs())?;
    if model.f.independent_of_y() {
        let zero = vec![0.0; model.n()];
        return Ok(ErgodicEstimate::exact(model.eval_f(x.coeffs(), &zero)));
    }
    ergodic_average(model, x, &SlowMap(model), budget, rng)
}

fn fbar_with_noise_dim<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &[f64],
    budget: &ErgodicBudget,
    noise_dim: usize,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    if model.f.independent_of_y() {
        let zero = vec![0.0; model.n()];
        model.f.evaluate(x, &zero, out);
        return Ok(());
    }
    let (series, ..) = frozen_series(model, x, &SlowMap(model), budget, noise_dim, rng)?;
    out.copy_from_slice(&series.mean());
    Ok(())
}

/// `delta F(x, y) = F(x, y) - F_bar(x)`.
pub fn delta_f(
    model: &ModelSpec,
    provider: &dyn AveragedDrift,
    x: &SpectralField,
    y: &SpectralField,
) -> Result<SpectralField> {
    model.check_state("delta F slow state", x.coeffs())?;
    model.check_state("delta F fast state", y.coeffs())?;
    let mut fbar = vec![0.0; model.n()];
    provider.fbar(x.coeffs(), &mut fbar)?;
    let mut out = model.eval_f(x.coeffs(), y.coeffs());
    for (o, f) in out.iter_mut().zip(&fbar) {
        *o -= f;
    }
    Ok(SpectralField::slow(out))
}

impl AveragedDrift for LinearBench {
    fn fbar(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&LinearBench::fbar(self, x));
        Ok(())
    }
}

/// Averaged drift estimated on demand by ergodic sampling, memoized by
/// quantized state.
pub struct ErgodicDrift {
    model: ModelSpec,
    budget: ErgodicBudget,
    seed: u64,
    noise_dim: usize,
    cache: DashMap<Vec<i64>, Vec<f64>>,
    max_entries: usize,
}

const QUANTUM: f64 = 1e-9;

impl ErgodicDrift {
    pub fn new(model: &ModelSpec, budget: ErgodicBudget, seed: u64) -> Self {
        ErgodicDrift {
            model: model.clone(),
            budget,
            seed,
            noise_dim: model.n(),
            cache: DashMap::new(),
            max_entries: 1 << 16,
        }
    }

    /// Normals drawn per frozen step; a common value couples estimates made
    /// at different Galerkin levels.
    pub fn with_noise_dim(mut self, noise_dim: usize) -> Self {
        self.noise_dim = noise_dim.max(self.model.n());
        self
    }

    pub fn with_cache_limit(mut self, entries: usize) -> Self {
        self.max_entries = entries;
        self
    }

    pub fn budget(&self) -> &ErgodicBudget {
        &self.budget
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    fn key(x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / QUANTUM).round() as i64).collect()
    }
}

impl AveragedDrift for ErgodicDrift {
    fn fbar(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let key = Self::key(x);
        if let Some(v) = self.cache.get(&key) {
            out.copy_from_slice(&v);
            return Ok(());
        }
        let keys: Vec<u64> = key.iter().map(|k| *k as u64).collect();
        let mut rng = stream(self.seed, &keys);
        fbar_with_noise_dim(&self.model, x, &self.budget, self.noise_dim, &mut rng, out)?;
        if self.cache.len() < self.max_entries {
            self.cache.insert(key, out.to_vec());
        }
        Ok(())
    }

    fn fbar_keyed(&self, x: &[f64], key: u64, out: &mut [f64]) -> Result<()> {
        let mut rng = stream(self.seed, &[key]);
        fbar_with_noise_dim(&self.model, x, &self.budget, self.noise_dim, &mut rng, out)
    }
}

/// Shared handle type for averaged-drift providers.
pub type DriftHandle = Arc<dyn AveragedDrift>;

/// Settings for the two-start coupling used by [`estimate_mixing_rate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MixingBudget {
    pub replicas: usize,
    pub horizon: f64,
    pub dt: f64,
    pub lags: usize,
}

impl MixingBudget {
    pub fn for_model(model: &ModelSpec) -> Self {
        let b1 = model.op_b.smallest();
        MixingBudget {
            replicas: 2000,
            horizon: 3.0 / b1,
            dt: 0.025 / b1,
            lags: 30,
        }
    }
}

/// Fitted exponential relaxation rate of an observable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixingReport {
    /// `None` when the decay could not be identified.
    pub rate: Option<f64>,
    pub r_squared: f64,
    pub lags: Vec<f64>,
    /// `E[phi(Y^b_t) - phi(Y^a_t)]` per lag.
    pub gaps: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fitted_points: usize,
    pub note: Option<String>,
}

/// Estimates `lambda` in `|T_t phi(x, y) - mu^x(phi)| <= C e^{-lambda t}` from
/// two synchronously coupled frozen chains started at `y = 0` and at three
/// stationary standard deviations per mode. Fits `log |gap|` against the lag
/// over the leading run of lags that clear three standard errors.
pub fn estimate_mixing_rate(
    model: &ModelSpec,
    x: &SpectralField,
    phi: &dyn Observable,
    budget: &MixingBudget,
    seed: u64,
) -> Result<MixingReport> {
    model.check_state("mixing slow state", x.coeffs())?;
    if phi.dim() != 1 {
        return Err(Error::config("mixing-rate observable must be scalar"));
    }
    check_positive("mixing horizon", budget.horizon)?;
    check_positive("mixing dt", budget.dt)?;
    if budget.replicas < 2 || budget.lags < 3 {
        return Err(Error::config("mixing fit needs >= 2 replicas and >= 3 lags"));
    }
    let n = model.n();
    let steps = (budget.horizon / budget.dt).round().max(1.0) as usize;
    let stride = (steps / budget.lags).max(1);
    let lag_steps: Vec<usize> = (0..=steps).step_by(stride).collect();
    let start_b: Vec<f64> = model
        .op_b
        .eigenvalues()
        .iter()
        .zip(model.q2.variances())
        .map(|(b, l)| {
            let v = if model.fast_noise { l / (2.0 * b) } else { 1.0 / (2.0 * b) };
            3.0 * v.sqrt()
        })
        .collect();
    let stepper = FrozenStepper::new(model, budget.dt);
    let xs = x.coeffs();

    let per_replica: Vec<Result<Vec<f64>>> = (0..budget.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[r as u64]);
            let mut ya = vec![0.0; n];
            let mut yb = start_b.clone();
            let mut sa = FrozenScratch::new(n);
            let mut sb = FrozenScratch::new(n);
            let (mut pa, mut pb) = ([0.0], [0.0]);
            let mut gaps = Vec::with_capacity(lag_steps.len());
            let mut next = 0;
            for step in 0..=steps {
                if step > 0 {
                    fill_normals(&mut rng, &mut sa.xi);
                    sb.xi.copy_from_slice(&sa.xi);
                    stepper.step(model, xs, &mut ya, &mut sa);
                    stepper.step(model, xs, &mut yb, &mut sb);
                    if !ya.iter().chain(&yb).all(|v| v.is_finite()) {
                        return Err(Error::Divergence { step });
                    }
                }
                if next < lag_steps.len() && lag_steps[next] == step {
                    phi.eval(xs, &ya, &mut pa);
                    phi.eval(xs, &yb, &mut pb);
                    gaps.push(pb[0] - pa[0]);
                    next += 1;
                }
            }
            Ok(gaps)
        })
        .collect();

    let mut series = SampleSeries::with_capacity(lag_steps.len(), budget.replicas);
    for g in per_replica {
        series.push(&g?);
    }
    let m = budget.replicas as f64;
    let gaps = series.mean();
    let stderr: Vec<f64> = (0..lag_steps.len())
        .map(|j| {
            let var = (0..series.len())
                .map(|i| (series.sample(i)[j] - gaps[j]).powi(2))
                .sum::<f64>()
                / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();
    let lags: Vec<f64> = lag_steps.iter().map(|s| *s as f64 * budget.dt).collect();
    let scale = gaps.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let points: Vec<(f64, f64)> = lags
        .iter()
        .zip(&gaps)
        .zip(&stderr)
        .take_while(|((_, g), s)| g.abs() > 3.0 * **s && g.abs() > 1e-12 * scale)
        .map(|((t, g), _)| (*t, g.abs().ln()))
        .collect();

    let mut report = MixingReport {
        rate: None,
        r_squared: 0.0,
        lags,
        gaps,
        stderr,
        fitted_points: points.len(),
        note: None,
    };
    if points.len() < 3 {
        report.note = Some(format!(
            "only {} lags clear the noise floor; decay not identifiable",
            points.len()
        ));
        return Ok(report);
    }
    let fit = ols_slope(&points).expect("distinct lags");
    report.r_squared = fit.r_squared;
    if fit.slope < 0.0 {
        report.rate = Some(-fit.slope);
    } else {
        report.note = Some(format!("non-decaying gap (fitted slope {:.3e})", fit.slope));
    }
    Ok(report)
}

/// Settings for [`estimate_dx_fbar`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DerivativeBudget {
    /// Frozen-path sampling for the outer ergodic average.
    pub ergodic: ErgodicBudget,
    /// Inner Poisson solves for `D_y Psi` (only used when `G` depends on `x`).
    pub poisson: PoissonBudget,
    /// Maximum number of outer samples that trigger a Poisson solve.
    pub poisson_samples: usize,
    /// Allow finite-difference jacobians when the maps have none.
    pub allow_fd_jacobians: bool,
}

impl DerivativeBudget {
    pub fn for_model(model: &ModelSpec) -> Self {
        DerivativeBudget {
            ergodic: ErgodicBudget::for_model(model),
            poisson: PoissonBudget::for_model(model).with_replicas(64),
            poisson_samples: 64,
            allow_fd_jacobians: true,
        }
    }
}

/// `D_x F_bar(x).h` by the corrector formula and by a common-random-number
/// central difference of `F_bar`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DxFbarEstimate {
    pub formula: Vec<f64>,
    pub formula_stderr: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub fd_stderr: Vec<f64>,
    /// FD step `delta = 1e-3 (1 + ||x||)`.
    pub delta: f64,
}

impl DxFbarEstimate {
    /// Largest component-wise disagreement relative to `max(5%, 3 SE)`;
    /// at most `1` means the two routes agree.
    pub fn agreement_ratio(&self) -> f64 {
        self.formula
            .iter()
            .zip(&self.finite_difference)
            .zip(self.formula_stderr.iter().zip(&self.fd_stderr))
            .map(|((a, b), (sa, sb))| {
                let se = (sa * sa + sb * sb).sqrt();
                let tol = (0.05 * a.abs().max(b.abs())).max(3.0 * se).max(1e-12);
                (a - b).abs() / tol
            })
            .fold(0.0, f64::max)
    }
}

/// `D_x F_bar(x).h = int [D_x F.h + D_y Psi.(D_x G.h)] d mu^x`, with `Psi`
/// the corrector of `delta F`, cross-checked by
/// `(F_bar(x + delta h) - F_bar(x - delta h)) / (2 delta)`.
pub fn estimate_dx_fbar(
    model: &ModelSpec,
    provider: &dyn AveragedDrift,
    x: &SpectralField,
    h: &SpectralField,
    budget: &DerivativeBudget,
    seed: u64,
) -> Result<DxFbarEstimate> {
    model.check_state("D_x F_bar slow state", x.coeffs())?;
    model.check_state("D_x F_bar direction", h.coeffs())?;
    let n = model.n();
    let xs = x.coeffs();
    let zero = vec![0.0; n];
    let mut probe = vec![0.0; n];
    if !budget.allow_fd_jacobians
        && (!model.f.jacobian_x(xs, &zero, h.coeffs(), &mut probe)
            || !model.g.jacobian_x(xs, &zero, h.coeffs(), &mut probe)
            || !model.f.jacobian_y(xs, &zero, h.coeffs(), &mut probe))
    {
        return Err(Error::config(
            "reaction maps lack analytic jacobians and the finite-difference fallback is disabled",
        ));
    }

    // Outer samples Y_j ~ mu^x.
    let ident = FnObservable::new(n, |_: &[f64], y: &[f64], out: &mut [f64]| {
        out.copy_from_slice(y)
    });
    let mut rng = stream(seed, &[0x6478]);
    let (ys, ..) = frozen_series(model, xs, &ident, &budget.ergodic, n, &mut rng)?;

    let g_moves = !model.g.independent_of_y() || {
        let mut gh = vec![0.0; n];
        directional_derivative(model.g.as_ref(), Argument::Slow, xs, &zero, h.coeffs(), &mut gh);
        gh.iter().any(|v| *v != 0.0)
    };
    let problem = if g_moves {
        Some(PoissonProblem::new(model, Arc::new(DeltaF::new(model, provider, xs)?)))
    } else {
        None
    };
    let stride = if g_moves {
        (ys.len() / budget.poisson_samples.max(1)).max(1)
    } else {
        1
    };
    let idx: Vec<usize> = (0..ys.len()).step_by(stride).collect();
    let horizon = match &problem {
        Some(p) => {
            let c = check_centering(p, x, &budget.ergodic, derive_seed(seed, &[4]))?;
            if !c.pass {
                return Err(c.error());
            }
            Some(p.fit_horizon(xs, ys.sample(idx[0]), &budget.poisson, derive_seed(seed, &[1]))?)
        }
        None => None,
    };

    let terms: Vec<Result<Vec<f64>>> = idx
        .par_iter()
        .map(|&j| {
            let y = ys.sample(j);
            let mut term = vec![0.0; n];
            directional_derivative(model.f.as_ref(), Argument::Slow, xs, y, h.coeffs(), &mut term);
            if let (Some(p), Some(t)) = (&problem, horizon) {
                let mut gh = vec![0.0; n];
                directional_derivative(model.g.as_ref(), Argument::Slow, xs, y, h.coeffs(), &mut gh);
                if gh.iter().any(|v| *v != 0.0) {
                    let pb = budget.poisson.with_horizon(t).waived();
                    let d = estimate_dy_psi(
                        p,
                        &SpectralField::slow(xs.to_vec()),
                        &SpectralField::fast(y.to_vec()),
                        &SpectralField::fast(gh),
                        &pb,
                        derive_seed(seed, &[2, j as u64]),
                    )?;
                    for (a, b) in term.iter_mut().zip(&d.value) {
                        *a += b;
                    }
                }
            }
            Ok(term)
        })
        .collect();
    let mut series = SampleSeries::with_capacity(n, idx.len());
    for t in terms {
        series.push(&t?);
    }
    let (formula, formula_stderr) = series.batch_means(budget.ergodic.batches);

    // Central difference with common random numbers.
    let delta = 1e-3 * (1.0 + x.norm());
    let plus: Vec<f64> = xs.iter().zip(h.coeffs()).map(|(a, b)| a + delta * b).collect();
    let minus: Vec<f64> = xs.iter().zip(h.coeffs()).map(|(a, b)| a - delta * b).collect();
    let (finite_difference, fd_stderr) = if model.f.independent_of_y() {
        let fp = model.eval_f(&plus, &zero);
        let fm = model.eval_f(&minus, &zero);
        (
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * delta)).collect(),
            vec![0.0; n],
        )
    } else {
        let fd_seed = derive_seed(seed, &[3]);
        let obs = SlowMap(model);
        let (sp, ..) = frozen_series(model, &plus, &obs, &budget.ergodic, n, &mut stream(fd_seed, &[]))?;
        let (sm, ..) = frozen_series(model, &minus, &obs, &budget.ergodic, n, &mut stream(fd_seed, &[]))?;
        let mut diff = SampleSeries::with_capacity(n, sp.len());
        let mut row = vec![0.0; n];
        for i in 0..sp.len() {
            for k in 0..n {
                row[k] = (sp.sample(i)[k] - sm.sample(i)[k]) / (2.0 * delta);
            }
            diff.push(&row);
        }
        diff.batch_means(budget.ergodic.batches)
    };

    Ok(DxFbarEstimate {
        formula,
        formula_stderr,
        finite_difference,
        fd_stderr,
        delta,
    })
}

/// Central-difference jacobian `D_x F_bar(x)` from a provider, column by
/// column. Stochastic providers should be keyed so both sides share noise.
pub fn fd_jacobian(
    provider: &dyn AveragedDrift,
    x: &[f64],
    delta: f64,
    key: Option<u64>,
) -> Result<nalgebra::DMatrix<f64>> {
    let n = x.len();
    let mut jac = nalgebra::DMatrix::zeros(n, n);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + delta;
        eval_drift(provider, &xp, key, &mut fp)?;
        xp[j] = x[j] - delta;
        eval_drift(provider, &xp, key, &mut fm)?;
        xp[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * delta);
        }
    }
    Ok(jac)
}

fn eval_drift(provider: &dyn AveragedDrift, x: &[f64], key: Option<u64>, out: &mut [f64]) -> Result<()> {
    match key {
        Some(k) => provider.fbar_keyed(x, k, out),
        None => provider.fbar(x, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{linear_bench, nemytskii_bench};
    use nalgebra::DMatrix;

    fn bench_with_k() -> LinearBench {
        let mut k = DMatrix::zeros(4, 4);
        k[(0, 0)] = 1.0;
        k[(0, 1)] = 0.5;
        k[(1, 1)] = 2.0;
        linear_bench(4, &[1.0, 0.5], k, &[0.2, 0.0, -0.1, 0.0]).unwrap()
    }

    #[test]
    fn decoupled_fbar_is_minus_half_x_exactly() {
        let b = linear_bench(4, &[], DMatrix::zeros(4, 4), &[0.0; 4]).unwrap();
        let x = SpectralField::slow(vec![1.0, -2.0, 0.5, 0.25]);
        let est = estimate_fbar(b.model(), &x, &ErgodicBudget::for_model(b.model()), &mut stream(1, &[])).unwrap();
        assert_eq!(est.value, vec![-0.5, 1.0, -0.25, -0.125]);
        assert!(est.stderr.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn linear_fbar_within_three_standard_errors() {
        let b = bench_with_k();
        let x = SpectralField::slow(vec![0.8, -0.4, 0.3, 0.1]);
        let budget = ErgodicBudget::for_model(b.model()).with_sample_time(2048.0);
        let est = estimate_fbar(b.model(), &x, &budget, &mut stream(2, &[])).unwrap();
        let exact = b.fbar(x.coeffs());
        for k in 0..4 {
            let se = est.stderr[k];
            assert!((est.value[k] - exact[k]).abs() <= 3.0 * se + 1e-14, "mode {k}: {} vs {} (se {se})", est.value[k], exact[k]);
        }
        assert!(est.sample_steps >= 10 * est.burn_in_steps);
    }

    #[test]
    fn short_sample_budget_is_rejected() {
        let b = bench_with_k();
        let budget = ErgodicBudget::for_model(b.model()).with_sample_time(10.0);
        let x = SpectralField::zeros(crate::spectral::Space::Slow, 4);
        assert!(matches!(
            estimate_fbar(b.model(), &x, &budget, &mut stream(0, &[])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn delta_f_matches_closed_form_and_vanishes_without_coupling() {
        let b = bench_with_k();
        let x = SpectralField::slow(vec![0.8, -0.4, 0.3, 0.1]);
        let y = SpectralField::fast(vec![0.1, 0.2, -0.3, 0.4]);
        let d = delta_f(b.model(), &b, &x, &y).unwrap();
        let exact = b.delta_f(x.coeffs(), y.coeffs());
        for k in 0..4 {
            assert!((d.coeffs()[k] - exact[k]).abs() < 1e-14);
        }
        let free = linear_bench(4, &[], DMatrix::zeros(4, 4), &[0.0; 4]).unwrap();
        assert_eq!(delta_f(free.model(), &free, &x, &y).unwrap().norm(), 0.0);
    }

    #[test]
    fn ergodic_drift_is_deterministic_and_cached() {
        let m = nemytskii_bench(4, 10).unwrap();
        let budget = ErgodicBudget::for_model(&m).with_sample_time(96.0);
        let p = ErgodicDrift::new(&m, budget, 11);
        let x = [0.5, -0.2, 0.1, 0.0];
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        p.fbar(&x, &mut a).unwrap();
        assert_eq!(p.cached(), 1);
        p.fbar(&x, &mut b).unwrap();
        assert_eq!(a, b);
        let q = ErgodicDrift::new(&m, budget, 11);
        q.fbar(&x, &mut b).unwrap();
        assert_eq!(a, b);
        q.fbar_keyed(&x, 3, &mut a).unwrap();
        q.fbar_keyed(&x, 3, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_rate_of_first_mode_and_its_square() {
        let b = bench_with_k();
        let x = SpectralField::slow(vec![0.8, -0.4, 0.3, 0.1]);
        let budget = MixingBudget::for_model(b.model());
        let lin = FnObservable::new(1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0]);
        let r = estimate_mixing_rate(b.model(), &x, &lin, &budget, 5).unwrap();
        let rate = r.rate.unwrap();
        assert!((rate - 1.0).abs() < 0.15, "rate {rate}");
        // Second moments relax at 2 beta_1 only when the frozen mean of the
        // mode vanishes; (K x)_1 = 0 here.
        let centred = SpectralField::slow(vec![0.2, -0.4, 0.3, 0.1]);
        assert_eq!(b.frozen_mean(centred.coeffs())[0], 0.0);
        let sq = FnObservable::new(1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0] * y[0]);
        let r = estimate_mixing_rate(b.model(), &centred, &sq, &budget, 6).unwrap();
        let rate = r.rate.unwrap();
        assert!((rate - 2.0).abs() < 0.4, "rate {rate}");
        let c = FnObservable::new(1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 1.0);
        let r = estimate_mixing_rate(b.model(), &x, &c, &budget, 7).unwrap();
        assert!(r.rate.is_none() && r.note.is_some());
    }

    #[test]
    fn dx_fbar_formula_and_difference_on_linear_bench() {
        let b = bench_with_k();
        let x = SpectralField::slow(vec![0.8, -0.4, 0.3, 0.1]);
        let h = SpectralField::slow(vec![0.3, 1.0, 0.0, -0.5]);
        let mut budget = DerivativeBudget::for_model(b.model());
        budget.poisson_samples = 16;
        let est = estimate_dx_fbar(b.model(), &b, &x, &h, &budget, 9).unwrap();
        let d = b.dx_fbar();
        for i in 0..4 {
            let exact: f64 = (0..4).map(|j| d[(i, j)] * h.coeffs()[j]).sum();
            assert!((est.formula[i] - exact).abs() < 2e-2 * (1.0 + exact.abs()), "formula {i}: {} vs {exact}", est.formula[i]);
            assert!((est.finite_difference[i] - exact).abs() < 1e-3, "fd {i}: {} vs {exact}", est.finite_difference[i]);
        }
        assert!(est.agreement_ratio() <= 1.0);
    }
}
