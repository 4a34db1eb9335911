//! Run configuration: TOML sections over a built-in profile.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{ErgodicBudget, ErgodicDrift};
use crate::deviation::{DeviationCoefficients, EstimatedCoefficients, SigmaBudget, TestFunctional};
use crate::error::{Error, Result};
use crate::integrators::{default_dt, AveragedDrift, SlowMapDrift};
use crate::models::{holder_bench, linear_bench, nemytskii_bench, LinearBench, ModelSpec};
use crate::poisson::PoissonBudget;
use crate::spectral::SpectralField;

/// Environment variable consulted for the thread budget when neither the
/// command line nor the config sets one.
pub const THREADS_ENV: &str = "MSPDE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `n = 8`, `eps = 2^-3..2^-8`, `M = 256`, `T = 1`.
    Desk,
    /// `n = 16`, `eps = 2^-3..2^-10`, `M = 1024`.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bench {
    Linear,
    Nemytskii,
    Holder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub bench: Bench,
    pub n: usize,
    /// Linear bench: slow coupling `c_k` on the leading modes.
    pub coupling: Vec<f64>,
    /// Linear bench: diagonal of `K`, zero-padded.
    pub k_diag: Vec<f64>,
    /// Linear bench: constant forcing, zero-padded.
    pub f0: Vec<f64>,
    /// Collocation points for pointwise benches; `0` selects `2 n + 2`.
    pub grid_points: usize,
    /// Holder exponent of the Holder bench.
    pub eta: f64,
    /// Initial slow state, zero-padded; absent selects `x0_k = 1 / k^2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Initial fast state, zero-padded; absent selects `y0_k = 1 / (2k)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub eps: Vec<f64>,
    pub horizon: f64,
    /// Fixed macro step; absent selects `min(eps / 4, T / 256)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub gammas: Vec<f64>,
    pub qs: Vec<f64>,
    pub paths: usize,
    /// Output times used for the supremum in time.
    pub output_times: usize,
    /// Also record the fluctuation integral and fit its scaling.
    pub fluctuation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakSection {
    pub paths: usize,
    pub functionals: Vec<TestFunctional>,
    /// Steps of the limit-process ensemble over `[0, T]`.
    pub zbar_steps: usize,
    /// Coefficient refresh interval along the limit path (nonlinear benches).
    pub refresh: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalerkinSection {
    pub levels: Vec<usize>,
    pub eps: f64,
    pub horizon: f64,
    pub paths: usize,
    pub gammas: Vec<f64>,
    /// Also compare averaged paths across levels.
    pub averaged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicSection {
    /// Sampling time of each averaged-drift estimate, in fast time units.
    pub sample_time: f64,
    /// Burn-in in fast time units; `0` selects `8 / beta_1`.
    pub burn_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonSection {
    pub replicas: usize,
    pub dt: f64,
    pub tail_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSection {
    /// Sampling time of the outer frozen path.
    pub sample_time: f64,
    /// Replicas per inner corrector solve.
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    /// `theta` in the integrability condition on `Upsilon`.
    pub theta: f64,
    pub eps: Vec<f64>,
    pub paths: usize,
    pub growth_samples: usize,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub rates: RateSection,
    pub weak: WeakSection,
    pub galerkin: GalerkinSection,
    pub ergodic: ErgodicSection,
    pub poisson: PoissonSection,
    pub sigma: SigmaSection,
    pub check: CheckSection,
}

fn dyadic(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 2f64.powi(-k)).collect()
}

impl SimConfig {
    pub fn profile(profile: Profile) -> Self {
        let (n, eps, paths) = match profile {
            Profile::Desk => (8, dyadic(3, 8), 256),
            Profile::Full => (16, dyadic(3, 10), 1024),
        };
        SimConfig {
            run: RunSection {
                seed: 20_240_601,
                out: PathBuf::from("out"),
                threads: None,
            },
            model: ModelSection {
                bench: Bench::Linear,
                n,
                coupling: vec![1.0, 0.5, 1.0 / 3.0],
                k_diag: vec![0.5, 0.5, 0.5],
                f0: Vec::new(),
                grid_points: 0,
                eta: 0.5,
                x0: None,
                y0: None,
            },
            rates: RateSection {
                eps: eps.clone(),
                horizon: 1.0,
                dt: None,
                gammas: vec![0.0, 0.25],
                qs: vec![2.0],
                paths,
                output_times: 17,
                fluctuation: false,
            },
            weak: WeakSection {
                paths: 4096,
                functionals: vec![TestFunctional::CosFirst],
                zbar_steps: 256,
                refresh: 8,
            },
            galerkin: GalerkinSection {
                levels: vec![8, 16, 24],
                eps: 0.125,
                horizon: 1.0,
                paths: 32,
                gammas: vec![0.0, 0.25],
                averaged: false,
            },
            ergodic: ErgodicSection {
                sample_time: 80.0,
                burn_in: 0.0,
            },
            poisson: PoissonSection {
                replicas: 1024,
                dt: 0.05,
                tail_tol: 1e-3,
            },
            sigma: SigmaSection {
                sample_time: 1024.0,
                replicas: 32,
            },
            check: CheckSection {
                theta: 0.5,
                eps: dyadic(2, 8),
                paths: 64,
                growth_samples: 2000,
            },
        }
    }

    /// Parses TOML sections over the given profile. Keys absent from the
    /// file keep their profile values; unknown keys are an error.
    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: SimConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.n == 0 {
            return Err(Error::config("model.n must be >= 1"));
        }
        for (name, list) in [("rates.eps", &self.rates.eps), ("check.eps", &self.check.eps)] {
            if list.is_empty() {
                return Err(Error::config(format!("{name} must be nonempty")));
            }
            if let Some(e) = list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
                return Err(Error::config(format!("{name}: eps = {e} outside (0, 1]")));
            }
        }
        if !(self.galerkin.eps > 0.0 && self.galerkin.eps <= 1.0) {
            return Err(Error::config("galerkin.eps outside (0, 1]"));
        }
        for (name, empty) in [
            ("rates.gammas", self.rates.gammas.is_empty()),
            ("rates.qs", self.rates.qs.is_empty()),
            ("weak.functionals", self.weak.functionals.is_empty()),
            ("galerkin.levels", self.galerkin.levels.is_empty()),
        ] {
            if empty {
                return Err(Error::config(format!("{name} must be nonempty")));
            }
        }
        if let Some(g) = self.rates.gammas.iter().find(|g| !(0.0..0.5).contains(*g)) {
            return Err(Error::config(format!("rates.gammas: gamma = {g} outside [0, 1/2)")));
        }
        if let Some(q) = self.rates.qs.iter().find(|q| **q <= 0.0) {
            return Err(Error::config(format!("rates.qs: q = {q} must be positive")));
        }
        if self.rates.paths < 2 || self.weak.paths < 2 || self.galerkin.paths < 1 {
            return Err(Error::config("path counts too small"));
        }
        if self.rates.horizon <= 0.0 || self.galerkin.horizon <= 0.0 {
            return Err(Error::config("horizons must be positive"));
        }
        if self.galerkin.levels.contains(&0) {
            return Err(Error::config("galerkin.levels must be >= 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the resolved configuration
    /// (first 16 hex digits). The output directory and thread count do not
    /// affect results and are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out = PathBuf::new();
        canonical.run.threads = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Macro step for a given `eps`.
    pub fn dt(&self, eps: f64, horizon: f64) -> f64 {
        self.rates.dt.unwrap_or_else(|| default_dt(eps, horizon))
    }

    /// Thread budget from the config or `MSPDE_THREADS`.
    pub fn threads(&self) -> Option<usize> {
        self.run
            .threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|t| *t > 0)
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

fn padded(v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|k| v.get(k).copied().unwrap_or(0.0)).collect()
}

/// A model built from the config, with the closed-form bench when linear.
#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub model: ModelSpec,
    pub linear: Option<LinearBench>,
}

impl ModelSection {
    /// Builds the model at level `n`. `grid` overrides the collocation grid
    /// of pointwise benches.
    pub fn build(&self, n: usize, grid: Option<usize>) -> Result<BuiltModel> {
        let m = grid.unwrap_or(if self.grid_points == 0 { 2 * n + 2 } else { self.grid_points });
        match self.bench {
            Bench::Linear => {
                let c: Vec<f64> = self.coupling.iter().take(n).copied().collect();
                let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(padded(&self.k_diag, n)));
                let b = linear_bench(n, &c, k, &padded(&self.f0, n))?;
                Ok(BuiltModel {
                    model: b.model().clone(),
                    linear: Some(b),
                })
            }
            Bench::Nemytskii => Ok(BuiltModel {
                model: nemytskii_bench(n, m)?,
                linear: None,
            }),
            Bench::Holder => Ok(BuiltModel {
                model: holder_bench(n, m, self.eta)?,
                linear: None,
            }),
        }
    }

    pub fn initial_state(&self, n: usize) -> (SpectralField, SpectralField) {
        let x0 = match &self.x0 {
            Some(v) => padded(v, n),
            None => (1..=n).map(|k| 1.0 / (k * k) as f64).collect(),
        };
        let y0 = match &self.y0 {
            Some(v) => padded(v, n),
            None => (1..=n).map(|k| 0.5 / k as f64).collect(),
        };
        (SpectralField::slow(x0), SpectralField::fast(y0))
    }
}

impl BuiltModel {
    /// Averaged-drift provider for macro step `dt` at scale `eps`. Ergodic
    /// estimates run the frozen equation on the coupled fast step `dt / eps`.
    pub fn drift(&self, ergodic: &ErgodicSection, eps: f64, dt: f64, seed: u64, noise_dim: usize) -> Arc<dyn AveragedDrift> {
        if let Some(b) = &self.linear {
            return Arc::new(b.clone());
        }
        if self.model.f.independent_of_y() {
            return Arc::new(SlowMapDrift::new(&self.model));
        }
        Arc::new(ErgodicDrift::new(&self.model, self.ergodic_budget(ergodic, Some(dt / eps)), seed).with_noise_dim(noise_dim))
    }

    /// Averaged-drift provider on the default frozen step, for single-point
    /// probes that are not tied to a coupled run.
    pub fn probe_drift(&self, ergodic: &ErgodicSection, seed: u64) -> Arc<dyn AveragedDrift> {
        if let Some(b) = &self.linear {
            return Arc::new(b.clone());
        }
        if self.model.f.independent_of_y() {
            return Arc::new(SlowMapDrift::new(&self.model));
        }
        Arc::new(ErgodicDrift::new(&self.model, self.ergodic_budget(ergodic, None), seed))
    }

    /// Ergodic budget from the config; `dt` in fast time, `None` keeps the
    /// model default.
    pub fn ergodic_budget(&self, ergodic: &ErgodicSection, dt: Option<f64>) -> ErgodicBudget {
        let mut b = ErgodicBudget::for_model(&self.model).with_sample_time(ergodic.sample_time);
        if let Some(dt) = dt {
            b = b.with_dt(dt);
        }
        if ergodic.burn_in > 0.0 {
            b = b.with_burn_in(ergodic.burn_in);
        }
        b
    }

    pub fn poisson_budget(&self, cfg: &PoissonSection) -> PoissonBudget {
        let mut b = PoissonBudget::for_model(&self.model).with_replicas(cfg.replicas).with_dt(cfg.dt);
        b.tail_tol = cfg.tail_tol;
        b
    }

    pub fn sigma_budget(&self, cfg: &SimConfig) -> SigmaBudget {
        let mut b = SigmaBudget::for_model(&self.model);
        b.ergodic = b.ergodic.with_sample_time(cfg.sigma.sample_time);
        b.poisson = self.poisson_budget(&cfg.poisson).with_replicas(cfg.sigma.replicas);
        b
    }

    /// Coefficients of the limit process.
    pub fn coefficients(&self, cfg: &SimConfig, drift: Arc<dyn AveragedDrift>) -> Arc<dyn DeviationCoefficients> {
        match &self.linear {
            Some(b) => Arc::new(b.clone()),
            None => Arc::new(
                EstimatedCoefficients::new(&self.model, drift, self.sigma_budget(cfg)).with_refresh(cfg.weak.refresh),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_profile_values_and_rejects_unknown_keys() {
        let cfg = SimConfig::from_toml_str("[run]\nseed = 7\n[rates]\npaths = 64\n", Profile::Desk).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.rates.paths, 64);
        assert_eq!(cfg.rates.eps.len(), 6);
        assert!(matches!(
            SimConfig::from_toml_str("[rates]\npathz = 3\n", Profile::Desk),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SimConfig::from_toml_str("[nonsense]\na = 1\n", Profile::Desk),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_rejects_bad_lists() {
        assert!(SimConfig::from_toml_str("[rates]\neps = []\n", Profile::Desk).is_err());
        assert!(SimConfig::from_toml_str("[rates]\neps = [1.5]\n", Profile::Desk).is_err());
        assert!(SimConfig::from_toml_str("[rates]\ngammas = [0.5]\n", Profile::Desk).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = SimConfig::profile(Profile::Desk);
        let b = SimConfig::from_toml_str("", Profile::Desk).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = SimConfig::from_toml_str("[run]\nseed = 1\n", Profile::Desk).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = SimConfig::from_toml_str("[run]\nout = \"elsewhere\"\nthreads = 3\n", Profile::Desk).unwrap();
        assert_eq!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn builds_each_bench() {
        let mut m = SimConfig::profile(Profile::Desk).model;
        let lin = m.build(4, None).unwrap();
        assert!(lin.linear.is_some());
        m.bench = Bench::Nemytskii;
        assert!(m.build(4, None).unwrap().linear.is_none());
        assert!(m.build(4, Some(5)).is_err());
        let (x0, y0) = m.initial_state(3);
        assert_eq!(x0.coeffs(), &[1.0, 0.25, 1.0 / 9.0]);
        assert_eq!(y0.coeffs()[1], 0.25);
    }
}
