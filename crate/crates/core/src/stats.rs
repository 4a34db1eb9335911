//! Small statistical helpers: i.i.d. means, batch means for correlated
//! samples, and ordinary least squares.

use serde::{Deserialize, Serialize};

/// Mean and standard error of i.i.d. samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate { mean, stderr: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }
}

/// Row-major store of vector-valued samples from one correlated chain.
#[derive(Clone, Debug)]
pub struct SampleSeries {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSeries {
    pub fn new(dim: usize) -> Self {
        SampleSeries {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, samples: usize) -> Self {
        SampleSeries {
            dim,
            data: Vec::with_capacity(dim * samples),
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.dim);
        self.data.extend_from_slice(sample);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.sample(i)) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Per-component mean and batch-means standard error. Uses at most
    /// `batches` contiguous batches; leftover samples at the end are folded
    /// into the mean but not into the batch variance.
    pub fn batch_means(&self, batches: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mean = self.mean();
        let b = batches.min(n);
        if b < 2 {
            return (mean, vec![f64::INFINITY; self.dim]);
        }
        let size = n / b;
        let mut var = vec![0.0; self.dim];
        for j in 0..b {
            let mut bm = vec![0.0; self.dim];
            for i in j * size..(j + 1) * size {
                for (acc, v) in bm.iter_mut().zip(self.sample(i)) {
                    *acc += v;
                }
            }
            for ((acc, m), v) in bm.iter().zip(&mean).zip(var.iter_mut()) {
                *v += (acc / size as f64 - m).powi(2);
            }
        }
        let se = var
            .iter()
            .map(|v| (v / ((b - 1) * b) as f64).sqrt())
            .collect();
        (mean, se)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope * x`. Needs at least two
/// distinct abscissae.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    let slope_stderr = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LinearFit {
        slope,
        intercept,
        slope_stderr,
        r_squared,
    })
}

/// Sample skewness and excess kurtosis.
pub fn skew_kurtosis(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_power_law_exponent() {
        let pts: Vec<(f64, f64)> = (3..=8)
            .map(|k| {
                let eps = 2f64.powi(-k);
                (eps.log2(), (3.7 * eps.powf(0.83)).log2())
            })
            .collect();
        let fit = ols_slope(&pts).unwrap();
        assert!((fit.slope - 0.83).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(ols_slope(&pts[..1]).is_none());
    }

    #[test]
    fn batch_means_of_iid_samples_match_naive_se() {
        let mut s = SampleSeries::new(1);
        let mut rng = crate::rng::stream(3, &[]);
        let xs: Vec<f64> = (0..32_000).map(|_| crate::rng::normal(&mut rng)).collect();
        for x in &xs {
            s.push(&[*x]);
        }
        let (_, se) = s.batch_means(32);
        let naive = Estimate::from_samples(&xs).stderr;
        assert!((se[0] / naive - 1.0).abs() < 0.4);
    }

    #[test]
    fn constant_samples_have_zero_spread() {
        let mut s = SampleSeries::new(2);
        for _ in 0..64 {
            s.push(&[1.0, -2.0]);
        }
        let (m, se) = s.batch_means(32);
        assert_eq!(m, vec![1.0, -2.0]);
        assert_eq!(se, vec![0.0, 0.0]);
    }
}
