//! Reaction maps `F: H1 x H2 -> H1`, `G: H1 x H2 -> H2` and the model
//! specification that bundles them with the operator and noise spectra.

mod linear;
mod nemytskii;

pub use linear::{linear_bench, LinearBench};
pub use nemytskii::{holder_bench, nemytskii_bench, PointwiseMap, SineTransform};

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::spectral::{NoiseSpectrum, OperatorSpectrum};

/// Regularity metadata carried by a reaction map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReactionMeta {
    /// `p` in `||M(x, y)|| <= C (1 + ||x|| + ||y||^p)`.
    pub growth_degree: u32,
    /// `C` in the growth bound.
    pub growth_constant: f64,
    /// Holder exponent in the fast variable, in `(0, 1]`.
    pub holder_exponent: f64,
    pub lipschitz: bool,
    /// Uniform bound `sup ||M(x, y)||`, when the map is bounded.
    pub bound: Option<f64>,
}

impl ReactionMeta {
    /// Whether the numerical schemes carry a convergence guarantee for this
    /// map. Holder-only couplings run, but nothing is promised.
    pub fn scheme_guarantee(&self) -> bool {
        self.lipschitz && self.holder_exponent >= 1.0
    }
}

/// A map `(x, y) -> M(x, y)` between Galerkin spaces.
///
/// Implementations must be reentrant: no interior mutability except
/// per-thread scratch space.
pub trait ReactionMap: Send + Sync {
    /// Length of the output coefficient vector.
    fn out_dim(&self) -> usize;

    fn evaluate(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `D_x M(x, y).h`. Returns `false` when no analytic derivative exists.
    fn jacobian_x(&self, _x: &[f64], _y: &[f64], _h: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// `D_y M(x, y).k`. Returns `false` when no analytic derivative exists.
    fn jacobian_y(&self, _x: &[f64], _y: &[f64], _k: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// True when the map does not depend on `y` at all.
    fn independent_of_y(&self) -> bool {
        false
    }

    fn meta(&self) -> ReactionMeta;
}

impl fmt::Debug for dyn ReactionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactionMap")
            .field("out_dim", &self.out_dim())
            .field("meta", &self.meta())
            .finish()
    }
}

/// Which argument a directional derivative acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Argument {
    Slow,
    Fast,
}

/// Directional derivative of `map` with respect to `arg`, falling back to a
/// central difference with step `1e-6 (1 + ||point||)` when the map has no
/// analytic jacobian.
pub fn directional_derivative(
    map: &dyn ReactionMap,
    arg: Argument,
    x: &[f64],
    y: &[f64],
    dir: &[f64],
    out: &mut [f64],
) {
    let analytic = match arg {
        Argument::Slow => map.jacobian_x(x, y, dir, out),
        Argument::Fast => map.jacobian_y(x, y, dir, out),
    };
    if !analytic {
        finite_difference(map, arg, x, y, dir, out);
    }
}

pub(crate) fn finite_difference(
    map: &dyn ReactionMap,
    arg: Argument,
    x: &[f64],
    y: &[f64],
    dir: &[f64],
    out: &mut [f64],
) {
    let base = match arg {
        Argument::Slow => x,
        Argument::Fast => y,
    };
    let scale = 1.0 + base.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-6 * scale;
    let plus: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + h * d).collect();
    let minus: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b - h * d).collect();
    let mut fp = vec![0.0; out.len()];
    let mut fm = vec![0.0; out.len()];
    match arg {
        Argument::Slow => {
            map.evaluate(&plus, y, &mut fp);
            map.evaluate(&minus, y, &mut fm);
        }
        Argument::Fast => {
            map.evaluate(x, &plus, &mut fp);
            map.evaluate(x, &minus, &mut fm);
        }
    }
    for ((o, p), m) in out.iter_mut().zip(&fp).zip(&fm) {
        *o = (p - m) / (2.0 * h);
    }
}

/// Galerkin model: spectra of `A`, `B`, `Q1`, `Q2` at a common level `n`
/// plus the reaction maps.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub op_a: OperatorSpectrum,
    pub op_b: OperatorSpectrum,
    pub q1: NoiseSpectrum,
    pub q2: NoiseSpectrum,
    pub f: Arc<dyn ReactionMap>,
    pub g: Arc<dyn ReactionMap>,
    /// Disable `W1` (deterministic slow equation).
    pub slow_noise: bool,
    /// Disable `W2`.
    pub fast_noise: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("f", &self.f.meta())
            .field("g", &self.g.meta())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        op_a: OperatorSpectrum,
        op_b: OperatorSpectrum,
        q1: NoiseSpectrum,
        q2: NoiseSpectrum,
        f: Arc<dyn ReactionMap>,
        g: Arc<dyn ReactionMap>,
    ) -> Result<Self> {
        let n = op_a.len();
        check_len("Galerkin level of B", n, op_b.len())?;
        check_len("Galerkin level of Q1", n, q1.len())?;
        check_len("Galerkin level of Q2", n, q2.len())?;
        check_len("output of F", n, f.out_dim())?;
        check_len("output of G", n, g.out_dim())?;
        Ok(ModelSpec {
            name: name.into(),
            op_a,
            op_b,
            q1,
            q2,
            f,
            g,
            slow_noise: true,
            fast_noise: true,
        })
    }

    /// Galerkin level.
    pub fn n(&self) -> usize {
        self.op_a.len()
    }

    pub fn with_noise(mut self, slow: bool, fast: bool) -> Self {
        self.slow_noise = slow;
        self.fast_noise = fast;
        self
    }

    /// Replaces the reaction maps, keeping the spectra.
    pub fn with_maps(mut self, f: Arc<dyn ReactionMap>, g: Arc<dyn ReactionMap>) -> Result<Self> {
        check_len("output of F", self.n(), f.out_dim())?;
        check_len("output of G", self.n(), g.out_dim())?;
        self.f = f;
        self.g = g;
        Ok(self)
    }

    pub fn scheme_guarantee(&self) -> bool {
        self.f.meta().scheme_guarantee() && self.g.meta().scheme_guarantee()
    }

    pub fn eval_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.f.evaluate(x, y, &mut out);
        out
    }

    pub fn eval_g(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.g.evaluate(x, y, &mut out);
        out
    }

    pub(crate) fn check_state(&self, context: &'static str, v: &[f64]) -> Result<()> {
        check_len(context, self.n(), v.len())
    }
}

/// Zero map (used to switch off a reaction term).
#[derive(Clone, Debug)]
pub struct ZeroMap {
    pub dim: usize,
}

impl ReactionMap for ZeroMap {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn jacobian_x(&self, _x: &[f64], _y: &[f64], _h: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }

    fn jacobian_y(&self, _x: &[f64], _y: &[f64], _k: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }

    fn independent_of_y(&self) -> bool {
        true
    }

    fn meta(&self) -> ReactionMeta {
        ReactionMeta {
            growth_degree: 1,
            growth_constant: 0.0,
            holder_exponent: 1.0,
            lipschitz: true,
            bound: Some(0.0),
        }
    }
}

/// Samples `(x, y)` uniformly in norm balls of radius `radius` and returns
/// the worst ratio `||M(x,y)|| / (1 + ||x|| + ||y||^p)` and the largest norm.
pub fn sample_growth(
    map: &dyn ReactionMap,
    n: usize,
    radius: f64,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = crate::rng::stream(seed, &[0x6772_6f77]);
    let p = map.meta().growth_degree as i32;
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    let mut out = vec![0.0; map.out_dim()];
    for _ in 0..samples {
        let x = random_in_ball(&mut rng, n, radius);
        let y = random_in_ball(&mut rng, n, radius);
        map.evaluate(&x, &y, &mut out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm / (1.0 + nx + ny.powi(p)));
        largest = largest.max(norm);
    }
    (worst, largest)
}

fn random_in_ball<R: rand::Rng>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    crate::rng::fill_normals(rng, &mut v);
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.random::<f64>();
    v.iter_mut().for_each(|c| *c *= r / norm);
    v
}

pub(crate) fn require_positive_level(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Spectrum("Galerkin level must be >= 1".into()));
    }
    Ok(())
}
