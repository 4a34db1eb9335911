use std::sync::Arc;

use nalgebra::DMatrix;

use super::{require_positive_level, ModelSpec, ReactionMap, ReactionMeta};
use crate::error::{check_len, Result};
use crate::spectral::{NoiseSpectrum, OperatorSpectrum};

/// `F(x, y) = f0 - x/2 + sum_k c_k <y, e_k> e_k`.
#[derive(Clone, Debug)]
struct LinearSlow {
    f0: Vec<f64>,
    coupling: Vec<f64>,
}

impl ReactionMap for LinearSlow {
    fn out_dim(&self) -> usize {
        self.f0.len()
    }

    fn evaluate(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] = self.f0[k] - 0.5 * x[k];
        }
        for (k, c) in self.coupling.iter().enumerate() {
            out[k] += c * y[k];
        }
    }

    fn jacobian_x(&self, _x: &[f64], _y: &[f64], h: &[f64], out: &mut [f64]) -> bool {
        for (o, v) in out.iter_mut().zip(h) {
            *o = -0.5 * v;
        }
        true
    }

    fn jacobian_y(&self, _x: &[f64], _y: &[f64], k: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        for (i, c) in self.coupling.iter().enumerate() {
            out[i] = c * k[i];
        }
        true
    }

    fn independent_of_y(&self) -> bool {
        self.coupling.iter().all(|c| *c == 0.0)
    }

    fn meta(&self) -> ReactionMeta {
        let f0 = self.f0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = self.coupling.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ReactionMeta {
            growth_degree: 1,
            growth_constant: f0.max(0.5).max(c),
            holder_exponent: 1.0,
            lipschitz: true,
            bound: None,
        }
    }
}

/// `G(x, y) = K x`.
#[derive(Clone, Debug)]
struct LinearFast {
    k: DMatrix<f64>,
}

impl ReactionMap for LinearFast {
    fn out_dim(&self) -> usize {
        self.k.nrows()
    }

    fn evaluate(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        mat_vec(&self.k, x, out);
    }

    fn jacobian_x(&self, _x: &[f64], _y: &[f64], h: &[f64], out: &mut [f64]) -> bool {
        mat_vec(&self.k, h, out);
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
            growth_constant: self.k.norm(),
            holder_exponent: 1.0,
            lipschitz: true,
            bound: if self.k.iter().all(|v| *v == 0.0) {
                Some(0.0)
            } else {
                None
            },
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

/// Closed-form benchmark: slow drift linear in both variables, fast drift
/// `K x` independent of `y`. The frozen fast dynamics are Ornstein-Uhlenbeck,
/// so the averaged drift, the corrector and the limit diffusion are explicit.
#[derive(Clone, Debug)]
pub struct LinearBench {
    model: ModelSpec,
    coupling: Vec<f64>,
    k: DMatrix<f64>,
    f0: Vec<f64>,
}

/// Linear benchmark on the reference spectra `alpha_k = beta_k = k^2`,
/// `lambda_{1,k} = k^-4`, `lambda_{2,k} = k^-2`.
pub fn linear_bench(n: usize, coupling: &[f64], k: DMatrix<f64>, f0: &[f64]) -> Result<LinearBench> {
    require_positive_level(n)?;
    LinearBench::with_spectra(
        OperatorSpectrum::dirichlet_laplacian(n),
        OperatorSpectrum::dirichlet_laplacian(n),
        NoiseSpectrum::power_law(n, 1.0, -4.0)?,
        NoiseSpectrum::power_law(n, 1.0, -2.0)?,
        coupling,
        k,
        f0,
    )
}

impl LinearBench {
    pub fn with_spectra(
        op_a: OperatorSpectrum,
        op_b: OperatorSpectrum,
        q1: NoiseSpectrum,
        q2: NoiseSpectrum,
        coupling: &[f64],
        k: DMatrix<f64>,
        f0: &[f64],
    ) -> Result<Self> {
        let n = op_a.len();
        if coupling.len() > n {
            return Err(crate::Error::Dimension {
                context: "coupling vector (must not exceed n)",
                expected: n,
                got: coupling.len(),
            });
        }
        check_len("K rows", n, k.nrows())?;
        check_len("K columns", n, k.ncols())?;
        check_len("f0", n, f0.len())?;
        let f = Arc::new(LinearSlow {
            f0: f0.to_vec(),
            coupling: coupling.to_vec(),
        });
        let g = Arc::new(LinearFast { k: k.clone() });
        let model = ModelSpec::new("linear", op_a, op_b, q1, q2, f, g)?;
        Ok(LinearBench {
            model,
            coupling: coupling.to_vec(),
            k,
            f0: f0.to_vec(),
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn k_matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    fn beta(&self) -> &[f64] {
        self.model.op_b.eigenvalues()
    }

    /// Stationary mean of the frozen equation, `m(x)_k = (K x)_k / beta_k`.
    pub fn frozen_mean(&self, x: &[f64]) -> Vec<f64> {
        let mut kx = vec![0.0; self.n()];
        mat_vec(&self.k, x, &mut kx);
        kx.iter().zip(self.beta()).map(|(v, b)| v / b).collect()
    }

    /// Stationary variance of frozen mode `k` (zero-based): `lambda_{2,k} / (2 beta_k)`.
    pub fn frozen_variance(&self, k: usize) -> f64 {
        self.model.q2.variances()[k] / (2.0 * self.beta()[k])
    }

    /// `F_bar(x) = f0 - x/2 + sum_k c_k m(x)_k e_k`.
    pub fn fbar(&self, x: &[f64]) -> Vec<f64> {
        let m = self.frozen_mean(x);
        let mut out: Vec<f64> = self.f0.iter().zip(x).map(|(f, v)| f - 0.5 * v).collect();
        for (k, c) in self.coupling.iter().enumerate() {
            out[k] += c * m[k];
        }
        out
    }

    /// `D_x F_bar = -I/2 + C diag(1/beta) K`.
    pub fn dx_fbar(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::from_diagonal_element(n, n, -0.5);
        for (k, c) in self.coupling.iter().enumerate() {
            for j in 0..n {
                d[(k, j)] += c * self.k[(k, j)] / self.beta()[k];
            }
        }
        d
    }

    /// `delta F(x, y) = sum_k c_k (y_k - m(x)_k) e_k`.
    pub fn delta_f(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let m = self.frozen_mean(x);
        let mut out = vec![0.0; self.n()];
        for (k, c) in self.coupling.iter().enumerate() {
            out[k] = c * (y[k] - m[k]);
        }
        out
    }

    /// Corrector solving `L2 Psi = -delta F`: `Psi_k = c_k (y_k - m_k) / beta_k`.
    pub fn corrector(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.delta_f(x, y)
            .iter()
            .zip(self.beta())
            .map(|(d, b)| d / b)
            .collect()
    }

    /// Limit diffusion `sigma = diag(|c_k| sqrt(lambda_{2,k}) / beta_k)`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut s = DMatrix::zeros(n, n);
        for (k, c) in self.coupling.iter().enumerate() {
            s[(k, k)] = c.abs() * self.model.q2.variances()[k].sqrt() / self.beta()[k];
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_bench_averages_to_minus_half() {
        let b = linear_bench(4, &[], DMatrix::zeros(4, 4), &[0.0; 4]).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(b.fbar(&x), vec![-0.5, 1.0, -0.25, -1.5]);
        assert!(b.model().f.independent_of_y());
    }

    #[test]
    fn closed_form_values() {
        let q2 = NoiseSpectrum::from_values(vec![2.0, 0.25]).unwrap();
        let b = LinearBench::with_spectra(
            OperatorSpectrum::dirichlet_laplacian(2),
            OperatorSpectrum::dirichlet_laplacian(2),
            NoiseSpectrum::power_law(2, 1.0, -4.0).unwrap(),
            q2,
            &[3.0],
            DMatrix::zeros(2, 2),
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(b.frozen_variance(0), 1.0);
        assert!((b.sigma()[(0, 0)] - 3.0 * 2f64.sqrt()).abs() < 1e-14);
        assert_eq!(b.sigma()[(1, 1)], 0.0);
    }

    #[test]
    fn dimension_errors() {
        assert!(linear_bench(2, &[1.0, 1.0, 1.0], DMatrix::zeros(2, 2), &[0.0; 2]).is_err());
        assert!(linear_bench(2, &[1.0], DMatrix::zeros(3, 2), &[0.0; 2]).is_err());
        assert!(linear_bench(2, &[1.0], DMatrix::zeros(2, 2), &[0.0; 3]).is_err());
        assert!(linear_bench(0, &[], DMatrix::zeros(0, 0), &[]).is_err());
    }

    #[test]
    fn dx_fbar_includes_fast_mean_response() {
        let mut k = DMatrix::zeros(3, 3);
        k[(0, 1)] = 2.0;
        k[(1, 1)] = 4.0;
        let b = linear_bench(3, &[1.0, 0.5], k, &[0.0; 3]).unwrap();
        let d = b.dx_fbar();
        // row 0: -1/2 e_0 + c_0 * K[0, .] / beta_0
        assert_eq!(d[(0, 0)], -0.5);
        assert_eq!(d[(0, 1)], 2.0);
        // row 1: c_1 * K[1, 1] / beta_1 = 0.5 * 4 / 4
        assert_eq!(d[(1, 1)], -0.5 + 0.5);
        // matches the derivative of fbar along e_1
        let x0 = [0.3, 0.1, -0.2];
        let x1 = [0.3, 1.1, -0.2];
        let diff: Vec<f64> = b.fbar(&x1).iter().zip(b.fbar(&x0)).map(|(a, b)| a - b).collect();
        for i in 0..3 {
            assert!((diff[i] - d[(i, 1)]).abs() < 1e-14);
        }
    }
}
