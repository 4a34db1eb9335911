//! Normal deviations: the rescaled error `Z = (X^eps - X_bar) / sqrt(eps)`,
//! the limit diffusion `sigma` with `sigma sigma^* / 2 = int delta F (x) Psi
//! d mu^x`, the limit process
//!
//! ```text
//! dZ = (A Z + D_x F_bar(X_bar) Z) dt + sigma(X_bar) dW~
//! ```
//!
//! and weak-error and fluctuation-integral estimators built on them.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::averaging::{
    fd_jacobian, frozen_series, DeltaF, ErgodicBudget, FnObservable, Observable,
};
use crate::error::{check_positive, Error, Result};
use crate::integrators::{
    default_dt, simulate_averaged, simulate_bundle, step_count, AveragedDrift, OutputTimes, PathBundle,
    SimOptions,
};
use crate::models::{LinearBench, ModelSpec};
use crate::poisson::{check_centering, solve_poisson_vector, PoissonBudget, PoissonProblem};
use crate::rng::{derive_seed, fill_normals, stream};
use crate::spectral::{weighted_norm_sq, OuStep, SpectralField};
use crate::stats::{Estimate, SampleSeries};

/// `Z_t = (X_t - X_bar_t) / sqrt(eps)` at every output time of the bundle.
pub fn compute_z_path(bundle: &PathBundle, eps: f64) -> Result<Vec<SpectralField>> {
    check_positive("eps", eps)?;
    if bundle.averaged.len() != bundle.slow.len() {
        return Err(Error::config("bundle carries no averaged path"));
    }
    let s = eps.sqrt();
    Ok(bundle
        .slow
        .iter()
        .zip(&bundle.averaged)
        .map(|(x, xb)| {
            let d: Vec<f64> = x.coeffs().iter().zip(xb.coeffs()).map(|(a, b)| (a - b) / s).collect();
            SpectralField::slow(d)
        })
        .collect())
}

/// Estimated limit diffusion at one slow state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaEstimate {
    /// Raw `2 * mean(delta F (x) Psi)`, row index from `delta F`.
    pub sigma_sq_raw: DMatrix<f64>,
    /// Batch-means standard errors of the symmetrized entries.
    pub stderr: DMatrix<f64>,
    /// PSD factor `V diag(sqrt(max(mu, 0))) V^T` of the symmetrized matrix.
    pub sigma: DMatrix<f64>,
    /// Sum of `|mu|` over the negative eigenvalues removed.
    pub clipped_mass: f64,
    /// Sum of the retained eigenvalues.
    pub trace: f64,
    /// `2 * mean(<delta F, Psi>)`.
    pub pairing: f64,
    pub samples: usize,
    pub horizon: f64,
}

impl SigmaEstimate {
    /// Symmetric part `(S + S^T) / 2` of the raw estimate.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        (&self.sigma_sq_raw + self.sigma_sq_raw.transpose()) * 0.5
    }

    /// `||sigma||_HS^2`.
    pub fn hs_norm_sq(&self) -> f64 {
        self.sigma.iter().map(|v| v * v).sum()
    }

    /// Builds the factor from an already symmetric `sigma sigma^T`.
    fn from_matrix(
        raw: DMatrix<f64>,
        stderr: DMatrix<f64>,
        pairing: f64,
        samples: usize,
        horizon: f64,
    ) -> Result<Self> {
        let sym = (&raw + raw.transpose()) * 0.5;
        let (sigma, clipped_mass, trace) = psd_sqrt(&sym);
        if clipped_mass > 0.2 * trace && clipped_mass > 0.0 {
            return Err(Error::IllConditioned {
                clipped: clipped_mass,
                trace,
            });
        }
        Ok(SigmaEstimate {
            sigma_sq_raw: raw,
            stderr,
            sigma,
            clipped_mass,
            trace,
            pairing,
            samples,
            horizon,
        })
    }
}

/// Symmetric PSD square root with negative eigenvalues clipped. Returns the
/// factor, the clipped mass and the retained trace.
pub fn psd_sqrt(sym: &DMatrix<f64>) -> (DMatrix<f64>, f64, f64) {
    let n = sym.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0.0, 0.0);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mut clipped = 0.0;
    let mut trace = 0.0;
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&mu| {
            if mu < 0.0 {
                clipped += -mu;
                0.0
            } else {
                trace += mu;
                mu.sqrt()
            }
        })
        .collect();
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots));
    (v * d * v.transpose(), clipped, trace)
}

/// Settings for [`estimate_sigma`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SigmaBudget {
    /// Outer frozen path (samples `Y_j ~ mu^x`).
    pub ergodic: ErgodicBudget,
    /// Inner Poisson solves for `Psi(x, Y_j)`.
    pub poisson: PoissonBudget,
}

impl SigmaBudget {
    pub fn for_model(model: &ModelSpec) -> Self {
        SigmaBudget {
            ergodic: ErgodicBudget::for_model(model).with_sample_time(1024.0 / model.op_b.smallest()),
            poisson: PoissonBudget::for_model(model).with_replicas(32),
        }
    }
}

/// `sigma(x)` from one long frozen path at `x`: at each thinned sample the
/// corrector `Psi(x, Y_j)` is solved with shared fast paths, the outer
/// products `delta F (x) Psi` are averaged, the result is doubled,
/// symmetrized and factorized with negative eigenvalues clipped.
pub fn estimate_sigma(
    model: &ModelSpec,
    provider: &dyn AveragedDrift,
    x: &SpectralField,
    budget: &SigmaBudget,
    seed: u64,
) -> Result<SigmaEstimate> {
    model.check_state("sigma slow state", x.coeffs())?;
    let n = model.n();
    let xs = x.coeffs();
    if model.f.independent_of_y() {
        return SigmaEstimate::from_matrix(DMatrix::zeros(n, n), DMatrix::zeros(n, n), 0.0, 0, 0.0);
    }
    let df = DeltaF::new(model, provider, xs)?;
    let problem = PoissonProblem::new(model, Arc::new(df.clone()));
    let centering = check_centering(&problem, x, &budget.ergodic, derive_seed(seed, &[1]))?;
    if !centering.pass {
        return Err(centering.error());
    }

    let ident = FnObservable::new(n, |_: &[f64], y: &[f64], out: &mut [f64]| out.copy_from_slice(y));
    let mut rng = stream(seed, &[2]);
    let (ys, ..) = frozen_series(model, xs, &ident, &budget.ergodic, n, &mut rng)?;
    if ys.len() < 2 {
        return Err(Error::config("sigma estimate needs at least two samples"));
    }
    let horizon = match budget.poisson.horizon {
        Some(t) => t,
        None => problem.fit_horizon(xs, ys.sample(0), &budget.poisson, derive_seed(seed, &[3]))?,
    };
    let inner = budget.poisson.with_horizon(horizon).waived();

    // One row per sample: the n x n outer product delta F (x) Psi, row-major.
    let rows: Vec<Result<Vec<f64>>> = (0..ys.len())
        .into_par_iter()
        .map(|j| {
            let y = ys.sample(j);
            let mut d = vec![0.0; n];
            df.eval(xs, y, &mut d);
            let psi = solve_poisson_vector(
                &problem,
                x,
                &SpectralField::fast(y.to_vec()),
                &inner,
                derive_seed(seed, &[4, j as u64]),
            )?;
            let mut row = vec![0.0; n * n + 1];
            for a in 0..n {
                for b in 0..n {
                    row[a * n + b] = d[a] * psi.value[b];
                }
            }
            row[n * n] = d.iter().zip(&psi.value).map(|(u, v)| u * v).sum();
            Ok(row)
        })
        .collect();
    let mut products = SampleSeries::with_capacity(n * n + 1, ys.len());
    let mut sym = SampleSeries::with_capacity(n * n, ys.len());
    for r in rows {
        let r = r?;
        let mut s = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                s[a * n + b] = r[a * n + b] + r[b * n + a];
            }
        }
        sym.push(&s);
        products.push(&r);
    }
    let mean = products.mean();
    let raw = DMatrix::from_fn(n, n, |a, b| 2.0 * mean[a * n + b]);
    let (_, se) = sym.batch_means(budget.ergodic.batches);
    let stderr = DMatrix::from_fn(n, n, |a, b| se[a * n + b]);
    SigmaEstimate::from_matrix(raw, stderr, 2.0 * mean[n * n], ys.len(), horizon)
}

/// Coefficients of the limit equation along the averaged path.
pub trait DeviationCoefficients: Send + Sync {
    /// `D_x F_bar(x)` as an `n x n` matrix.
    fn dx_fbar(&self, x: &[f64], key: u64) -> Result<DMatrix<f64>>;
    /// `sigma(x)`.
    fn sigma(&self, x: &[f64], key: u64) -> Result<DMatrix<f64>>;
    /// Recompute the coefficients every this many steps.
    fn refresh_interval(&self) -> usize {
        1
    }
    /// Coefficients do not depend on `x`.
    fn constant(&self) -> bool {
        false
    }
}

impl DeviationCoefficients for LinearBench {
    fn dx_fbar(&self, _x: &[f64], _key: u64) -> Result<DMatrix<f64>> {
        Ok(LinearBench::dx_fbar(self))
    }

    fn sigma(&self, _x: &[f64], _key: u64) -> Result<DMatrix<f64>> {
        Ok(LinearBench::sigma(self))
    }

    fn constant(&self) -> bool {
        true
    }
}

/// Coefficients estimated on the fly: `D_x F_bar` by keyed central
/// differences of a stochastic provider, `sigma` by [`estimate_sigma`].
pub struct EstimatedCoefficients {
    model: ModelSpec,
    provider: Arc<dyn AveragedDrift>,
    budget: SigmaBudget,
    refresh: usize,
}

impl EstimatedCoefficients {
    pub fn new(model: &ModelSpec, provider: Arc<dyn AveragedDrift>, budget: SigmaBudget) -> Self {
        EstimatedCoefficients {
            model: model.clone(),
            provider,
            budget,
            refresh: 8,
        }
    }

    pub fn with_refresh(mut self, k: usize) -> Self {
        self.refresh = k.max(1);
        self
    }
}

impl DeviationCoefficients for EstimatedCoefficients {
    fn dx_fbar(&self, x: &[f64], key: u64) -> Result<DMatrix<f64>> {
        let delta = 1e-3 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
        fd_jacobian(self.provider.as_ref(), x, delta, Some(key))
    }

    fn sigma(&self, x: &[f64], key: u64) -> Result<DMatrix<f64>> {
        let est = estimate_sigma(
            &self.model,
            self.provider.as_ref(),
            &SpectralField::slow(x.to_vec()),
            &self.budget,
            key,
        )?;
        Ok(est.sigma)
    }

    fn refresh_interval(&self) -> usize {
        self.refresh
    }
}

/// Per-step noise factor `L` with `L L^T = C`,
/// `C_jk = (sigma sigma^T)_jk (1 - e^{-(alpha_j + alpha_k) dt}) / (alpha_j + alpha_k)`,
/// the covariance of `int_0^dt e^{(dt - s) A} sigma dW~_s`.
fn convolution_factor(alpha: &[f64], sigma: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let ss = sigma * sigma.transpose();
    let n = alpha.len();
    let c = DMatrix::from_fn(n, n, |j, k| {
        let s = alpha[j] + alpha[k];
        ss[(j, k)] * (-(-s * dt).exp_m1()) / s
    });
    let eig = SymmetricEigen::new(c);
    let roots = eig.eigenvalues.map(|mu| mu.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Exponential-Euler path of the limit process on the grid of `xbar`
/// (spacing `dt`), `Z_0 = 0`, coefficients frozen at the left endpoint and
/// refreshed every [`DeviationCoefficients::refresh_interval`] steps.
/// `rng` drives `W~` only.
pub fn simulate_zbar<R: Rng + ?Sized>(
    model: &ModelSpec,
    coeffs: &dyn DeviationCoefficients,
    xbar: &[SpectralField],
    dt: f64,
    key: u64,
    rng: &mut R,
) -> Result<Vec<SpectralField>> {
    check_positive("dt", dt)?;
    let n = model.n();
    let alpha = model.op_a.eigenvalues();
    let lin = OuStep::new(alpha, None, dt);
    let mut z = vec![0.0; n];
    let mut path = Vec::with_capacity(xbar.len());
    path.push(SpectralField::slow(z.clone()));
    let mut d = DMatrix::zeros(n, n);
    let mut l = DMatrix::zeros(n, n);
    let mut xi = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut noise = vec![0.0; n];
    let refresh = if coeffs.constant() { usize::MAX } else { coeffs.refresh_interval().max(1) };
    for step in 0..xbar.len().saturating_sub(1) {
        if step == 0 || step % refresh == 0 {
            let xs = xbar[step].coeffs();
            model.check_state("averaged path", xs)?;
            let k = derive_seed(key, &[step as u64]);
            d = coeffs.dx_fbar(xs, k)?;
            l = convolution_factor(alpha, &coeffs.sigma(xs, k)?, dt);
        }
        for i in 0..n {
            drift[i] = (0..n).map(|j| d[(i, j)] * z[j]).sum();
        }
        fill_normals(rng, &mut xi);
        for i in 0..n {
            noise[i] = (0..n).map(|j| l[(i, j)] * xi[j]).sum();
        }
        lin.advance(&mut z, &drift, &noise);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        path.push(SpectralField::slow(z.clone()));
    }
    Ok(path)
}

/// Built-in smooth bounded test functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunctional {
    /// `exp(-||P_4 z||^2)`.
    GaussianBump,
    /// `cos <z, e_1>`.
    CosFirst,
    /// `tanh <z, e_2>`.
    TanhSecond,
    Constant(f64),
}

impl TestFunctional {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            TestFunctional::GaussianBump => (-z.iter().take(4).map(|v| v * v).sum::<f64>()).exp(),
            TestFunctional::CosFirst => z.first().copied().unwrap_or(0.0).cos(),
            TestFunctional::TanhSecond => z.get(1).copied().unwrap_or(0.0).tanh(),
            TestFunctional::Constant(c) => c,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TestFunctional::GaussianBump => "gaussian-bump".into(),
            TestFunctional::CosFirst => "cos-first".into(),
            TestFunctional::TanhSecond => "tanh-second".into(),
            TestFunctional::Constant(c) => format!("constant({c})"),
        }
    }
}

/// `E phi(Z^eps_T)` against `E phi(Z_bar_T)` for one `(eps, phi)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeakErrorReport {
    pub functional: String,
    pub eps: f64,
    pub z_eps: Estimate,
    pub z_bar: Estimate,
    pub diff: f64,
    pub diff_stderr: f64,
    pub paths: usize,
}

impl WeakErrorReport {
    /// The difference clears two combined standard errors.
    pub fn significant(&self) -> bool {
        self.diff.abs() > 2.0 * self.diff_stderr
    }
}

/// Inputs of [`weak_error`].
#[derive(Clone)]
pub struct WeakErrorSetup {
    pub eps: Vec<f64>,
    pub horizon: f64,
    pub functionals: Vec<TestFunctional>,
    pub paths: usize,
    pub seed: u64,
    pub x0: SpectralField,
    pub y0: SpectralField,
    pub drift: Arc<dyn AveragedDrift>,
    pub coeffs: Arc<dyn DeviationCoefficients>,
    /// Fixed macro step for the coupled runs; `None` selects
    /// `min(eps / 4, T / 256)`.
    pub dt: Option<f64>,
    /// Steps of the limit-process ensemble over `[0, T]`.
    pub zbar_steps: usize,
}

/// Terminal samples of the limit process: `paths` independent averaged
/// paths (fresh `W1`) each carrying an independent `W~`.
pub fn zbar_ensemble(
    model: &ModelSpec,
    drift: &dyn AveragedDrift,
    coeffs: &dyn DeviationCoefficients,
    x0: &SpectralField,
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<SpectralField>> {
    let dt = horizon / steps as f64;
    step_count(horizon, dt)?;
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng_w1 = stream(seed, &[0x7731, p as u64]);
            let mut rng_w = stream(seed, &[0x777e, p as u64]);
            let xbar = simulate_averaged(model, drift, horizon, dt, x0, &mut rng_w1)?;
            let z = simulate_zbar(model, coeffs, &xbar, dt, derive_seed(seed, &[0x6b, p as u64]), &mut rng_w)?;
            Ok(z.last().expect("nonempty path").clone())
        })
        .collect()
}

/// Terminal `Z^eps_T` samples from coupled bundles.
pub fn z_eps_ensemble(
    model: &ModelSpec,
    drift: Arc<dyn AveragedDrift>,
    eps: f64,
    horizon: f64,
    dt: f64,
    x0: &SpectralField,
    y0: &SpectralField,
    paths: usize,
    seed: u64,
) -> Result<Vec<SpectralField>> {
    let opts = SimOptions::new(x0.clone(), y0.clone())
        .with_averaged(drift)
        .with_output(OutputTimes::Equispaced(2));
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, &[p as u64]);
            let o = opts.clone().with_drift_key(derive_seed(seed, &[0x6b, p as u64]));
            let b = simulate_bundle(model, eps, horizon, dt, &mut rng, &o)?;
            Ok(compute_z_path(&b, eps)?.pop().expect("terminal output"))
        })
        .collect()
}

/// Weak errors `|E phi(Z^eps_T) - E phi(Z_bar_T)|` for every `(eps, phi)`.
/// One limit-process ensemble is shared across all `eps`.
pub fn weak_error(model: &ModelSpec, setup: &WeakErrorSetup) -> Result<Vec<WeakErrorReport>> {
    if setup.paths < 2 {
        return Err(Error::config("weak error needs at least two paths"));
    }
    let zbar = zbar_ensemble(
        model,
        setup.drift.as_ref(),
        setup.coeffs.as_ref(),
        &setup.x0,
        setup.horizon,
        setup.zbar_steps,
        setup.paths,
        derive_seed(setup.seed, &[0x7a62]),
    )?;
    let mut reports = Vec::new();
    for (i, &eps) in setup.eps.iter().enumerate() {
        let dt = setup.dt.unwrap_or_else(|| default_dt(eps, setup.horizon));
        let zeps = z_eps_ensemble(
            model,
            setup.drift.clone(),
            eps,
            setup.horizon,
            dt,
            &setup.x0,
            &setup.y0,
            setup.paths,
            derive_seed(setup.seed, &[0x7a65, i as u64]),
        )?;
        for phi in &setup.functionals {
            let a: Vec<f64> = zeps.iter().map(|z| phi.eval(z.coeffs())).collect();
            let b: Vec<f64> = zbar.iter().map(|z| phi.eval(z.coeffs())).collect();
            let ea = Estimate::from_samples(&a);
            let eb = Estimate::from_samples(&b);
            reports.push(WeakErrorReport {
                functional: phi.name(),
                eps,
                z_eps: ea,
                z_bar: eb,
                diff: ea.mean - eb.mean,
                diff_stderr: (ea.stderr.powi(2) + eb.stderr.powi(2)).sqrt(),
                paths: setup.paths,
            });
        }
    }
    Ok(reports)
}

/// `E ||(-A)^gamma int_s^T e^{(T - r) A} delta F(X_r, Y_r) dr||^2` over
/// bundles that accumulated the fluctuation integral.
pub fn fluctuation_integral(model: &ModelSpec, bundles: &[PathBundle], gamma: f64) -> Result<Estimate> {
    if !(0.0..0.5).contains(&gamma) {
        return Err(Error::Domain {
            parameter: "gamma",
            value: gamma,
            constraint: "fluctuation estimate needs gamma in [0, 1/2)",
        });
    }
    let eigs = model.op_a.eigenvalues();
    let vals = bundles
        .iter()
        .map(|b| {
            b.fluctuation
                .as_ref()
                .map(|j| weighted_norm_sq(eigs, gamma, j.coeffs()))
                .ok_or_else(|| Error::config("bundle carries no fluctuation integral"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{zero_state, FluctuationWindow};
    use crate::models::linear_bench;
    use crate::stats::skew_kurtosis;

    fn diag_bench(n: usize, c: &[f64]) -> LinearBench {
        linear_bench(n, c, DMatrix::zeros(n, n), &vec![0.0; n]).unwrap()
    }

    #[test]
    fn z_path_at_unit_eps_is_the_difference() {
        let b = diag_bench(3, &[1.0]);
        let (x0, y0) = zero_state(3);
        let opts = SimOptions::new(x0, y0).with_averaged(Arc::new(b.clone()));
        let bundle = simulate_bundle(b.model(), 1.0, 1.0, 1.0 / 16.0, &mut stream(1, &[]), &opts).unwrap();
        let z = compute_z_path(&bundle, 1.0).unwrap();
        for ((z, x), xb) in z.iter().zip(&bundle.slow).zip(&bundle.averaged) {
            assert_eq!(z, &x.sub(xb));
        }
        let no_avg = simulate_bundle(b.model(), 1.0, 1.0, 1.0 / 16.0, &mut stream(1, &[]), &SimOptions::new(zero_state(3).0, zero_state(3).1)).unwrap();
        assert!(matches!(compute_z_path(&no_avg, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn z_vanishes_when_the_slow_drift_ignores_y() {
        let b = diag_bench(3, &[]);
        let (x0, y0) = zero_state(3);
        let opts = SimOptions::new(SpectralField::slow(vec![1.0, 0.5, 0.2]), y0).with_averaged(Arc::new(b.clone()));
        let _ = x0;
        let bundle = simulate_bundle(b.model(), 0.1, 1.0, 1.0 / 40.0, &mut stream(2, &[]), &opts).unwrap();
        for z in compute_z_path(&bundle, 0.1).unwrap() {
            assert_eq!(z.norm(), 0.0);
        }
    }

    #[test]
    fn psd_factor_reproduces_projection() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, -0.05]);
        let (s, clipped, trace) = psd_sqrt(&m);
        let eig = SymmetricEigen::new(m.clone());
        let proj = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)))
            * eig.eigenvectors.transpose();
        assert!((&s * s.transpose() - proj).abs().max() < 1e-10);
        assert!(clipped > 0.0 && clipped < 0.1 && trace > 2.9);
    }

    #[test]
    fn sigma_closed_form_on_diagonal_bench() {
        let b = diag_bench(3, &[1.0, 0.5]);
        let x = SpectralField::slow(vec![0.3, -0.2, 0.1]);
        let budget = SigmaBudget::for_model(b.model());
        let est = estimate_sigma(b.model(), &b, &x, &budget, 4).unwrap();
        let exact = b.sigma();
        for k in 0..2 {
            let rel = (est.sigma[(k, k)] - exact[(k, k)]).abs() / exact[(k, k)];
            assert!(rel < 0.1, "mode {k}: {} vs {}", est.sigma[(k, k)], exact[(k, k)]);
        }
        let sym = est.symmetrized();
        assert!(sym[(0, 1)].abs() <= 2.0 * est.stderr[(0, 1)], "{} vs se {}", sym[(0, 1)], est.stderr[(0, 1)]);
        assert!(est.clipped_mass <= 0.05 * est.trace);
        assert!((est.hs_norm_sq() - est.clipped_mass - est.symmetrized().trace()).abs() < 1e-10);
        if est.clipped_mass == 0.0 {
            assert!((est.hs_norm_sq() - est.pairing).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_coupling_gives_zero_sigma() {
        let b = diag_bench(3, &[]);
        let est = estimate_sigma(b.model(), &b, &SpectralField::slow(vec![0.0; 3]), &SigmaBudget::for_model(b.model()), 0).unwrap();
        assert_eq!(est.sigma, DMatrix::zeros(3, 3));
    }

    struct Silent;
    impl DeviationCoefficients for Silent {
        fn dx_fbar(&self, x: &[f64], _: u64) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_diagonal_element(x.len(), x.len(), -0.5))
        }
        fn sigma(&self, x: &[f64], _: u64) -> Result<DMatrix<f64>> {
            Ok(DMatrix::zeros(x.len(), x.len()))
        }
    }

    #[test]
    fn zero_sigma_keeps_zbar_at_zero() {
        let b = diag_bench(2, &[1.0]);
        let xbar = vec![SpectralField::slow(vec![0.0; 2]); 33];
        let z = simulate_zbar(b.model(), &Silent, &xbar, 1.0 / 32.0, 0, &mut stream(0, &[])).unwrap();
        assert!(z.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zbar_variance_and_gaussianity_on_linear_bench() {
        let b = diag_bench(2, &[1.0]);
        let x0 = SpectralField::slow(vec![0.5, 0.1]);
        let zs = zbar_ensemble(b.model(), &b, &b, &x0, 1.0, 256, 10_000, 3).unwrap();
        let z1: Vec<f64> = zs.iter().map(|z| z.coeffs()[0]).collect();
        let mean = z1.iter().sum::<f64>() / z1.len() as f64;
        let var = z1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z1.len() - 1) as f64;
        let a = -(1.0 + 0.5);
        let s = b.sigma()[(0, 0)];
        let exact = s * s * (2.0 * a * 1.0f64).exp_m1() / (2.0 * a);
        assert!((var / exact - 1.0).abs() < 0.05, "{var} vs {exact}");
        let (skew, kurt) = skew_kurtosis(&z1);
        assert!(skew.abs() < 0.1 && kurt.abs() < 0.2, "{skew} {kurt}");
    }

    #[test]
    fn constant_functional_has_zero_weak_error() {
        let b = diag_bench(2, &[1.0]);
        let (x0, y0) = zero_state(2);
        let setup = WeakErrorSetup {
            eps: vec![0.25],
            horizon: 1.0,
            functionals: vec![TestFunctional::Constant(0.7), TestFunctional::CosFirst],
            paths: 16,
            seed: 1,
            x0,
            y0,
            drift: Arc::new(b.clone()),
            coeffs: Arc::new(b.clone()),
            dt: None,
            zbar_steps: 64,
        };
        let r = weak_error(b.model(), &setup).unwrap();
        assert_eq!(r[0].diff, 0.0);
        assert_eq!(r[1].functional, "cos-first");
    }

    #[test]
    fn fluctuation_integral_domain_and_zero_case() {
        let b = diag_bench(2, &[]);
        let (x0, y0) = zero_state(2);
        let mut opts = SimOptions::new(x0, y0).with_averaged(Arc::new(b.clone()));
        opts.fluctuation = Some(FluctuationWindow { start: 0.0 });
        let bundle = simulate_bundle(b.model(), 0.25, 1.0, 1.0 / 16.0, &mut stream(0, &[]), &opts).unwrap();
        let est = fluctuation_integral(b.model(), std::slice::from_ref(&bundle), 0.0).unwrap();
        assert_eq!(est.mean, 0.0);
        assert!(matches!(
            fluctuation_integral(b.model(), &[bundle], 0.5),
            Err(Error::Domain { .. })
        ));
    }
}
