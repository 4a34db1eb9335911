use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use super::{require_positive_level, ModelSpec, ReactionMap, ReactionMeta};
use crate::error::{Error, Result};
use crate::spectral::{NoiseSpectrum, OperatorSpectrum};

/// Discrete sine transform between the first `n` coefficients in the basis
/// `sqrt(2/pi) sin(k xi)` on `(0, pi)` and values at the `m` interior nodes
/// `xi_j = j pi / (m + 1)`.
///
/// Analysis is exact for sine polynomials of degree `<= m`, so
/// `analyze(synthesize(c)) == c` up to rounding.
#[derive(Clone, Debug)]
pub struct SineTransform {
    n: usize,
    m: usize,
    // m x n, row-major
    table: Vec<f64>,
    weight: f64,
}

impl SineTransform {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        require_positive_level(n)?;
        if m < 2 * n {
            return Err(Error::Aliasing { grid: m, modes: n });
        }
        let norm = (2.0 / PI).sqrt();
        let h = PI / (m + 1) as f64;
        let mut table = Vec::with_capacity(m * n);
        for j in 1..=m {
            for k in 1..=n {
                table.push(norm * (k as f64 * j as f64 * h).sin());
            }
        }
        Ok(SineTransform {
            n,
            m,
            table,
            weight: h,
        })
    }

    pub fn modes(&self) -> usize {
        self.n
    }

    pub fn grid_points(&self) -> usize {
        self.m
    }

    pub fn synthesize(&self, coeffs: &[f64], values: &mut [f64]) {
        for (j, v) in values.iter_mut().enumerate() {
            let row = &self.table[j * self.n..(j + 1) * self.n];
            *v = row.iter().zip(coeffs).map(|(s, c)| s * c).sum();
        }
    }

    pub fn analyze(&self, values: &[f64], coeffs: &mut [f64]) {
        coeffs.fill(0.0);
        for (j, v) in values.iter().enumerate() {
            let row = &self.table[j * self.n..(j + 1) * self.n];
            for (c, s) in coeffs.iter_mut().zip(row) {
                *c += s * v;
            }
        }
        coeffs.iter_mut().for_each(|c| *c *= self.weight);
    }
}

pub type Pointwise = fn(f64, f64) -> f64;

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Nemytskii operator `M(x, y)(xi) = m(x(xi), y(xi))`, evaluated
/// pseudo-spectrally: synthesize on the grid, apply `m` pointwise, project
/// back onto the first `n` modes.
#[derive(Clone)]
pub struct PointwiseMap {
    transform: Arc<SineTransform>,
    value: Pointwise,
    dx: Option<Pointwise>,
    dy: Option<Pointwise>,
    y_free: bool,
    meta: ReactionMeta,
}

impl PointwiseMap {
    pub fn new(
        transform: Arc<SineTransform>,
        value: Pointwise,
        dx: Option<Pointwise>,
        dy: Option<Pointwise>,
        meta: ReactionMeta,
    ) -> Self {
        PointwiseMap {
            transform,
            value,
            dx,
            dy,
            y_free: false,
            meta,
        }
    }

    pub fn independent_of_fast(mut self) -> Self {
        self.y_free = true;
        self
    }

    fn apply(&self, x: &[f64], y: &[f64], dir: Option<(&[f64], Pointwise)>, out: &mut [f64]) {
        let m = self.transform.grid_points();
        SCRATCH.with(|cell| {
            let mut buf = cell.borrow_mut();
            buf.resize(4 * m, 0.0);
            let (ux, rest) = buf.split_at_mut(m);
            let (uy, rest) = rest.split_at_mut(m);
            let (ud, w) = rest.split_at_mut(m);
            self.transform.synthesize(x, ux);
            self.transform.synthesize(y, uy);
            match dir {
                None => {
                    for j in 0..m {
                        w[j] = (self.value)(ux[j], uy[j]);
                    }
                }
                Some((d, deriv)) => {
                    self.transform.synthesize(d, ud);
                    for j in 0..m {
                        w[j] = deriv(ux[j], uy[j]) * ud[j];
                    }
                }
            }
            self.transform.analyze(w, out);
        });
    }
}

impl ReactionMap for PointwiseMap {
    fn out_dim(&self) -> usize {
        self.transform.modes()
    }

    fn evaluate(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.apply(x, y, None, out);
    }

    fn jacobian_x(&self, x: &[f64], y: &[f64], h: &[f64], out: &mut [f64]) -> bool {
        match self.dx {
            Some(d) => {
                self.apply(x, y, Some((h, d)), out);
                true
            }
            None => false,
        }
    }

    fn jacobian_y(&self, x: &[f64], y: &[f64], k: &[f64], out: &mut [f64]) -> bool {
        match self.dy {
            Some(d) => {
                self.apply(x, y, Some((k, d)), out);
                true
            }
            None => false,
        }
    }

    fn independent_of_y(&self) -> bool {
        self.y_free
    }

    fn meta(&self) -> ReactionMeta {
        self.meta
    }
}

fn reference_spectra(n: usize) -> Result<(OperatorSpectrum, OperatorSpectrum, NoiseSpectrum, NoiseSpectrum)> {
    Ok((
        OperatorSpectrum::dirichlet_laplacian(n),
        OperatorSpectrum::dirichlet_laplacian(n),
        NoiseSpectrum::power_law(n, 1.0, -4.0)?,
        NoiseSpectrum::power_law(n, 1.0, -2.0)?,
    ))
}

fn bench_g(t: Arc<SineTransform>) -> PointwiseMap {
    PointwiseMap::new(
        t,
        |x, y| x.tanh() * (1.0 + 0.5 * y.sin()),
        Some(|x, y| (1.0 - x.tanh().powi(2)) * (1.0 + 0.5 * y.sin())),
        Some(|x, y| x.tanh() * 0.5 * y.cos()),
        ReactionMeta {
            growth_degree: 1,
            growth_constant: 1.5 * PI.sqrt(),
            holder_exponent: 1.0,
            lipschitz: true,
            bound: Some(1.5 * PI.sqrt()),
        },
    )
}

/// Nonlinear benchmark on the reference spectra:
/// `F(x, y) = sin x + arctan y`, `G(x, y) = tanh x (1 + sin(y) / 2)`,
/// both applied pointwise on an `m`-point grid (`m >= 2n`).
pub fn nemytskii_bench(n: usize, grid_points: usize) -> Result<ModelSpec> {
    let t = Arc::new(SineTransform::new(n, grid_points)?);
    let f_bound = (1.0 + 0.5 * PI) * PI.sqrt();
    let f = PointwiseMap::new(
        t.clone(),
        |x, y| x.sin() + y.atan(),
        Some(|x, _| x.cos()),
        Some(|_, y| 1.0 / (1.0 + y * y)),
        ReactionMeta {
            growth_degree: 1,
            growth_constant: f_bound,
            holder_exponent: 1.0,
            lipschitz: true,
            bound: Some(f_bound),
        },
    );
    let (a, b, q1, q2) = reference_spectra(n)?;
    ModelSpec::new("nemytskii", a, b, q1, q2, Arc::new(f), Arc::new(bench_g(t)))
}

/// Holder-only variant: `F(x, y) = sin x + |y|^eta`. Runs, but carries no
/// scheme-convergence guarantee (`scheme_guarantee() == false` when `eta < 1`).
pub fn holder_bench(n: usize, grid_points: usize, eta: f64) -> Result<ModelSpec> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain {
            parameter: "eta",
            value: eta,
            constraint: "Holder exponent must lie in (0, 1]",
        });
    }
    let t = Arc::new(SineTransform::new(n, grid_points)?);
    // the exponent is baked into a closure-free fn pointer via a lookup
    let value: Pointwise = match eta {
        e if (e - 0.5).abs() < 1e-12 => |x, y| x.sin() + y.abs().sqrt(),
        e if (e - 1.0).abs() < 1e-12 => |x, y| x.sin() + y.abs(),
        _ => {
            return Err(Error::config(
                "holder bench supports eta = 0.5 or eta = 1.0",
            ))
        }
    };
    let f = PointwiseMap::new(
        t.clone(),
        value,
        Some(|x, _| x.cos()),
        None,
        ReactionMeta {
            growth_degree: 1,
            growth_constant: 2.0 * PI.sqrt(),
            holder_exponent: eta,
            lipschitz: eta >= 1.0,
            bound: None,
        },
    );
    let (a, b, q1, q2) = reference_spectra(n)?;
    ModelSpec::new("holder", a, b, q1, q2, Arc::new(f), Arc::new(bench_g(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{directional_derivative, finite_difference, sample_growth, Argument};
    use crate::rng::{fill_normals, stream};

    #[test]
    fn aliasing_is_rejected() {
        assert!(matches!(
            nemytskii_bench(8, 15),
            Err(Error::Aliasing { grid: 15, modes: 8 })
        ));
        assert!(nemytskii_bench(8, 16).is_ok());
    }

    #[test]
    fn zero_state_maps_to_zero() {
        let m = nemytskii_bench(6, 14).unwrap();
        let z = vec![0.0; 6];
        assert!(m.eval_f(&z, &z).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_nonlinearity_round_trips() {
        let t = Arc::new(SineTransform::new(8, 17).unwrap());
        let id = PointwiseMap::new(
            t,
            |x, _| x,
            None,
            None,
            ReactionMeta {
                growth_degree: 1,
                growth_constant: 1.0,
                holder_exponent: 1.0,
                lipschitz: true,
                bound: None,
            },
        );
        let mut rng = stream(2, &[]);
        let mut x = vec![0.0; 8];
        fill_normals(&mut rng, &mut x);
        let mut out = vec![0.0; 8];
        id.evaluate(&x, &x, &mut out);
        for (a, b) in x.iter().zip(&out) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn growth_and_boundedness() {
        let m = nemytskii_bench(8, 18).unwrap();
        let g_bound = 1.5 * PI.sqrt();
        let (_, largest_g) = sample_growth(m.g.as_ref(), 8, 10.0, 1000, 4);
        assert!(largest_g <= g_bound);
        let (ratio_f, _) = sample_growth(m.f.as_ref(), 8, 10.0, 1000, 5);
        assert!(ratio_f <= m.f.meta().growth_constant);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let m = nemytskii_bench(8, 18).unwrap();
        let mut rng = stream(9, &[]);
        let h = 1e-4;
        for _ in 0..10 {
            let mut x = vec![0.0; 8];
            let mut y = vec![0.0; 8];
            let mut d = vec![0.0; 8];
            fill_normals(&mut rng, &mut x);
            fill_normals(&mut rng, &mut y);
            fill_normals(&mut rng, &mut d);
            for map in [&m.f, &m.g] {
                for arg in [Argument::Slow, Argument::Fast] {
                    let mut analytic = vec![0.0; 8];
                    directional_derivative(map.as_ref(), arg, &x, &y, &d, &mut analytic);
                    let (xp, yp, xm, ym) = match arg {
                        Argument::Slow => (
                            x.iter().zip(&d).map(|(a, b)| a + h * b).collect::<Vec<_>>(),
                            y.clone(),
                            x.iter().zip(&d).map(|(a, b)| a - h * b).collect::<Vec<_>>(),
                            y.clone(),
                        ),
                        Argument::Fast => (
                            x.clone(),
                            y.iter().zip(&d).map(|(a, b)| a + h * b).collect::<Vec<_>>(),
                            x.clone(),
                            y.iter().zip(&d).map(|(a, b)| a - h * b).collect::<Vec<_>>(),
                        ),
                    };
                    let mut fp = vec![0.0; 8];
                    let mut fm = vec![0.0; 8];
                    map.evaluate(&xp, &yp, &mut fp);
                    map.evaluate(&xm, &ym, &mut fm);
                    let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    let num: f64 = fd.iter().zip(&analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    assert!(num / den <= 1e-5, "relative error {}", num / den);
                }
            }
        }
    }

    #[test]
    fn holder_bench_is_flagged() {
        let m = holder_bench(4, 8, 0.5).unwrap();
        assert!(!m.scheme_guarantee());
        assert!(nemytskii_bench(4, 8).unwrap().scheme_guarantee());
        assert!(holder_bench(4, 8, 1.5).is_err());
        // no analytic y-derivative: the fallback is used
        let z = vec![0.1; 4];
        let mut out = vec![0.0; 4];
        assert!(!m.f.jacobian_y(&z, &z, &z, &mut out));
        finite_difference(m.f.as_ref(), Argument::Fast, &z, &z, &z, &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
