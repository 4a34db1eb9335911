//! Diagonal operators, their semigroups and fractional powers, and exact
//! sampling of Q-Wiener increments and Ornstein-Uhlenbeck transitions.
//!
//! Everything lives in the eigenbasis of the linear operators: a state is a
//! coefficient vector, `A e_k = -alpha_k e_k`, and the noise covariance
//! `Q e_k = lambda_k e_k` commutes with the operator.

mod trace;

pub use trace::{check_trace_conditions, SeriesCheck, SeriesStatus, TraceReport, UpsilonCheck};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_positive, Error, Result};
use crate::rng::fill_normals;

/// Which Hilbert space a field belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    Slow,
    Fast,
}

/// How a spectrum was produced. Formula-backed spectra can be re-evaluated
/// at a different truncation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumSource {
    /// `scale * k^exponent` for `k = 1, 2, ...`
    PowerLaw { scale: f64, exponent: f64 },
    Explicit,
}

impl SpectrumSource {
    fn values(&self, n: usize) -> Option<Vec<f64>> {
        match *self {
            SpectrumSource::PowerLaw { scale, exponent } => Some(
                (1..=n)
                    .map(|k| scale * (k as f64).powf(exponent))
                    .collect(),
            ),
            SpectrumSource::Explicit => None,
        }
    }
}

/// Eigenvalues `alpha_k > 0`, non-decreasing, of `-A` (or `-B`).
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpectrum {
    eigenvalues: Vec<f64>,
    source: SpectrumSource,
}

impl OperatorSpectrum {
    pub fn from_values(eigenvalues: Vec<f64>) -> Result<Self> {
        Self::validated(eigenvalues, SpectrumSource::Explicit)
    }

    pub fn power_law(n: usize, scale: f64, exponent: f64) -> Result<Self> {
        let source = SpectrumSource::PowerLaw { scale, exponent };
        let values = source.values(n).unwrap_or_default();
        Self::validated(values, source)
    }

    /// Dirichlet Laplacian on `(0, pi)`: `alpha_k = k^2`.
    pub fn dirichlet_laplacian(n: usize) -> Self {
        Self::power_law(n, 1.0, 2.0).expect("k^2 is a valid spectrum")
    }

    fn validated(eigenvalues: Vec<f64>, source: SpectrumSource) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Spectrum("truncation level must be >= 1".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Spectrum(format!(
                "eigenvalues must be finite and positive, found {bad}"
            )));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Spectrum("eigenvalues must be non-decreasing".into()));
        }
        Ok(OperatorSpectrum {
            eigenvalues,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue (the spectral gap).
    pub fn smallest(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn source(&self) -> &SpectrumSource {
        &self.source
    }

    /// Same spectrum at another truncation level. Explicit spectra can only
    /// be shortened.
    pub fn at_level(&self, n: usize) -> Result<Self> {
        match self.source.values(n) {
            Some(values) => Self::validated(values, self.source.clone()),
            None if n <= self.len() => {
                Self::validated(self.eigenvalues[..n].to_vec(), SpectrumSource::Explicit)
            }
            None => Err(Error::Spectrum(format!(
                "explicit spectrum of length {} cannot be extended to {n}",
                self.len()
            ))),
        }
    }

    /// Multiplies every eigenvalue by `factor` (used for the `B / eps` scaling).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        check_positive("factor", factor)?;
        let source = match self.source {
            SpectrumSource::PowerLaw { scale, exponent } => SpectrumSource::PowerLaw {
                scale: scale * factor,
                exponent,
            },
            SpectrumSource::Explicit => SpectrumSource::Explicit,
        };
        Self::validated(self.eigenvalues.iter().map(|v| v * factor).collect(), source)
    }
}

/// Variances `lambda_k > 0` of a trace-class Q-Wiener process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpectrum {
    variances: Vec<f64>,
    source: SpectrumSource,
}

impl NoiseSpectrum {
    pub fn from_values(variances: Vec<f64>) -> Result<Self> {
        Self::validated(variances, SpectrumSource::Explicit)
    }

    pub fn power_law(n: usize, scale: f64, exponent: f64) -> Result<Self> {
        let source = SpectrumSource::PowerLaw { scale, exponent };
        let values = source.values(n).unwrap_or_default();
        Self::validated(values, source)
    }

    fn validated(variances: Vec<f64>, source: SpectrumSource) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::Spectrum("truncation level must be >= 1".into()));
        }
        if let Some(bad) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Spectrum(format!(
                "noise variances must be finite and positive, found {bad}"
            )));
        }
        Ok(NoiseSpectrum { variances, source })
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn source(&self) -> &SpectrumSource {
        &self.source
    }

    /// Partial trace `sum_k lambda_k` at the current truncation.
    pub fn trace(&self) -> f64 {
        self.variances.iter().sum()
    }

    pub fn at_level(&self, n: usize) -> Result<Self> {
        match self.source.values(n) {
            Some(values) => Self::validated(values, self.source.clone()),
            None if n <= self.len() => {
                Self::validated(self.variances[..n].to_vec(), SpectrumSource::Explicit)
            }
            None => Err(Error::Spectrum(format!(
                "explicit noise spectrum of length {} cannot be extended to {n}",
                self.len()
            ))),
        }
    }
}

/// Coefficients `<x, e_k>` of a slow or fast state in the operator eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    space: Space,
}

impl SpectralField {
    pub fn new(space: Space, coeffs: Vec<f64>) -> Self {
        SpectralField { coeffs, space }
    }

    pub fn zeros(space: Space, n: usize) -> Self {
        SpectralField {
            coeffs: vec![0.0; n],
            space,
        }
    }

    pub fn slow(coeffs: Vec<f64>) -> Self {
        Self::new(Space::Slow, coeffs)
    }

    pub fn fast(coeffs: Vec<f64>) -> Self {
        Self::new(Space::Fast, coeffs)
    }

    /// Unit vector `e_k` (zero-based `k`).
    pub fn basis(space: Space, n: usize, k: usize) -> Self {
        let mut f = Self::zeros(space, n);
        f.coeffs[k] = 1.0;
        f
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `||x||_{(-A)^gamma}^2 = sum_k alpha_k^{2 gamma} x_k^2`.
    pub fn graph_norm_sq(&self, spec: &OperatorSpectrum, gamma: f64) -> Result<f64> {
        check_len("graph norm", spec.len(), self.len())?;
        Ok(weighted_norm_sq(spec.eigenvalues(), gamma, &self.coeffs))
    }

    pub fn dot(&self, other: &SpectralField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// `self - other`, keeping this field's space tag.
    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
            space: self.space,
        }
    }

    pub fn scaled(&self, factor: f64) -> SpectralField {
        SpectralField {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
            space: self.space,
        }
    }

    /// Zero-padded or truncated copy with `n` modes.
    pub fn resized(&self, n: usize) -> SpectralField {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(n, 0.0);
        SpectralField {
            coeffs,
            space: self.space,
        }
    }
}

pub(crate) fn weighted_norm_sq(eigs: &[f64], gamma: f64, x: &[f64]) -> f64 {
    if gamma == 0.0 {
        return x.iter().map(|c| c * c).sum();
    }
    eigs.iter()
        .zip(x)
        .map(|(a, c)| a.powf(2.0 * gamma) * c * c)
        .sum()
}

/// `e^{tA} x`, mode by mode `e^{-alpha_k t} x_k`.
pub fn apply_semigroup(spec: &OperatorSpectrum, t: f64, x: &SpectralField) -> Result<SpectralField> {
    check_len("apply_semigroup", spec.len(), x.len())?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain {
            parameter: "t",
            value: t,
            constraint: "semigroup time must be finite and >= 0",
        });
    }
    if t == 0.0 {
        return Ok(x.clone());
    }
    let coeffs = spec
        .eigenvalues()
        .iter()
        .zip(x.coeffs())
        .map(|(a, c)| (-a * t).exp() * c)
        .collect();
    Ok(SpectralField::new(x.space(), coeffs))
}

/// `(-A)^gamma x` for `gamma` in `[0, 1]`.
pub fn apply_fractional_power(
    spec: &OperatorSpectrum,
    gamma: f64,
    x: &SpectralField,
) -> Result<SpectralField> {
    check_len("apply_fractional_power", spec.len(), x.len())?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain {
            parameter: "gamma",
            value: gamma,
            constraint: "fractional power must lie in [0, 1]",
        });
    }
    if gamma == 0.0 {
        return Ok(x.clone());
    }
    let coeffs = spec
        .eigenvalues()
        .iter()
        .zip(x.coeffs())
        .map(|(a, c)| a.powf(gamma) * c)
        .collect();
    Ok(SpectralField::new(x.space(), coeffs))
}

/// Increment `W(t + dt) - W(t)` of a Q-Wiener process: independent
/// `N(0, lambda_k dt)` coefficients.
pub fn sample_qwiener_increment<R: Rng + ?Sized>(
    noise: &NoiseSpectrum,
    space: Space,
    dt: f64,
    rng: &mut R,
) -> Result<SpectralField> {
    check_positive("dt", dt)?;
    let mut coeffs = vec![0.0; noise.len()];
    fill_normals(rng, &mut coeffs);
    for (c, l) in coeffs.iter_mut().zip(noise.variances()) {
        *c *= (l * dt).sqrt();
    }
    Ok(SpectralField::new(space, coeffs))
}

/// Precomputed per-mode factors of one exact OU transition over a fixed step:
/// `y' = decay * y + gain * drift + noise_sd * xi`.
#[derive(Clone, Debug)]
pub(crate) struct OuStep {
    pub decay: Vec<f64>,
    pub gain: Vec<f64>,
    pub noise_sd: Vec<f64>,
}

impl OuStep {
    /// Factors for an effective step `tau` (already divided by any time-scale
    /// parameter). `variances = None` disables the noise.
    pub fn new(eigs: &[f64], variances: Option<&[f64]>, tau: f64) -> Self {
        let decay = eigs.iter().map(|a| (-a * tau).exp()).collect();
        let gain = eigs.iter().map(|a| -(-a * tau).exp_m1() / a).collect();
        let noise_sd = match variances {
            Some(vars) => eigs
                .iter()
                .zip(vars)
                .map(|(a, l)| (-l * (-2.0 * a * tau).exp_m1() / (2.0 * a)).sqrt())
                .collect(),
            None => vec![0.0; eigs.len()],
        };
        OuStep {
            decay,
            gain,
            noise_sd,
        }
    }

    /// Writes the sampled stochastic convolution `noise_sd * xi` into `conv`.
    pub fn convolution(&self, normals: &[f64], conv: &mut [f64]) {
        for ((c, s), z) in conv.iter_mut().zip(&self.noise_sd).zip(normals) {
            *c = s * z;
        }
    }

    /// In-place transition using an already sampled convolution term.
    pub fn advance(&self, y: &mut [f64], drift: &[f64], conv: &[f64]) {
        for k in 0..y.len() {
            y[k] = self.decay[k] * y[k] + self.gain[k] * drift[k] + conv[k];
        }
    }
}

/// One exact transition of `dY = -beta Y dt + drift dt + dW_Q` with the drift
/// held constant over the step. `noise = None` gives the deterministic flow.
/// Stable for any `beta * dt`.
pub fn exact_ou_step<R: Rng + ?Sized>(
    spec: &OperatorSpectrum,
    noise: Option<&NoiseSpectrum>,
    dt: f64,
    y: &SpectralField,
    drift: &SpectralField,
    rng: &mut R,
) -> Result<SpectralField> {
    check_positive("dt", dt)?;
    check_len("exact_ou_step state", spec.len(), y.len())?;
    check_len("exact_ou_step drift", spec.len(), drift.len())?;
    if let Some(q) = noise {
        check_len("exact_ou_step noise", spec.len(), q.len())?;
    }
    let step = OuStep::new(spec.eigenvalues(), noise.map(|q| q.variances()), dt);
    let mut conv = vec![0.0; y.len()];
    if noise.is_some() {
        let mut xi = vec![0.0; y.len()];
        fill_normals(rng, &mut xi);
        step.convolution(&xi, &mut conv);
    }
    let mut out = y.clone();
    step.advance(out.coeffs_mut(), drift.coeffs(), &conv);
    Ok(out)
}
