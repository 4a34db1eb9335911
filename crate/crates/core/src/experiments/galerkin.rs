//! Galerkin convergence: solutions at several truncation levels against a
//! reference level, all driven by the same noise.

use rayon::prelude::*;
use serde::Serialize;

use super::config::SimConfig;
use super::{timestamp, Status, VERSION};
use crate::error::{Error, Result};
use crate::integrators::{simulate_bundle, OutputTimes, PathBundle, SimOptions};
use crate::rng::{derive_seed, stream};
use crate::spectral::{weighted_norm_sq, SpectralField};
use crate::stats::Estimate;

const TAG_PATH: u64 = 0x4741;
const TAG_KEY: u64 = 0x474b;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GalerkinRow {
    pub n: usize,
    pub gamma: f64,
    /// `E ||(-A)^gamma (X^n_T - P_n X^ref_T)||`.
    pub projected: Estimate,
    /// `E ||(-A)^gamma (X^n_T - X^ref_T)||`, including the unresolved tail.
    pub full: Estimate,
    /// Same as `projected` for the averaged paths, when requested.
    pub averaged: Option<Estimate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GalerkinReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: u64,
    pub n_ref: usize,
    pub eps: f64,
    pub rows: Vec<GalerkinRow>,
    /// Projected and full errors decrease strictly along the levels.
    pub monotone: bool,
    /// Every projected error is exactly zero.
    pub exact_zero: bool,
    pub status: Status,
}

impl GalerkinReport {
    pub fn rows_for(&self, gamma: f64) -> Vec<&GalerkinRow> {
        self.rows.iter().filter(|r| r.gamma == gamma).collect()
    }
}

fn tail_sq(eigs: &[f64], gamma: f64, x: &[f64], from: usize) -> f64 {
    x[from..]
        .iter()
        .zip(&eigs[from..])
        .map(|(v, a)| a.powf(2.0 * gamma) * v * v)
        .sum()
}

/// Runs levels `galerkin.levels` against `n_ref = 2 max(levels)`. Pointwise
/// benches use one collocation grid `2 n_ref + 2` at every level, and every
/// level draws `n_ref` normals per step, so truncation is the only
/// difference between levels.
pub fn run_galerkin(cfg: &SimConfig) -> Result<GalerkinReport> {
    cfg.validate()?;
    let g = &cfg.galerkin;
    let mut levels = g.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let n_ref = 2 * levels.last().copied().expect("levels validated nonempty");
    let grid = 2 * n_ref + 2;
    let seed = cfg.run.seed;
    let dt = cfg.dt(g.eps, g.horizon);

    let run_level = |n: usize| -> Result<Vec<PathBundle>> {
        let built = cfg.model.build(n, Some(grid))?;
        let (x0, y0) = cfg.model.initial_state(n);
        let mut opts = SimOptions::new(x0, y0).with_output(OutputTimes::Equispaced(2));
        opts.noise_dim = n_ref;
        if g.averaged {
            opts = opts.with_averaged(built.drift(&cfg.ergodic, g.eps, dt, derive_seed(seed, &[TAG_KEY]), n_ref));
        }
        (0..g.paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(seed, &[TAG_PATH, p as u64]);
                let o = opts.clone().with_drift_key(derive_seed(seed, &[TAG_KEY, p as u64]));
                simulate_bundle(&built.model, g.eps, g.horizon, dt, &mut rng, &o)
            })
            .collect()
    };

    let reference = run_level(n_ref)?;
    let eigs = cfg.model.build(n_ref, Some(grid))?.model.op_a.eigenvalues().to_vec();
    let mut rows = Vec::new();
    for &n in &levels {
        if n >= n_ref {
            return Err(Error::config("Galerkin levels must lie below the reference level"));
        }
        let bundles = run_level(n)?;
        for &gamma in &g.gammas {
            let mut proj = Vec::with_capacity(g.paths);
            let mut full = Vec::with_capacity(g.paths);
            let mut avg = Vec::with_capacity(g.paths);
            for (b, r) in bundles.iter().zip(&reference) {
                let xr = r.terminal_slow().coeffs();
                let diff = b.terminal_slow().sub(&SpectralField::slow(xr[..n].to_vec()));
                let p2 = weighted_norm_sq(&eigs[..n], gamma, diff.coeffs());
                proj.push(p2.sqrt());
                full.push((p2 + tail_sq(&eigs, gamma, xr, n)).sqrt());
                if let (Some(xb), Some(rb)) = (b.terminal_averaged(), r.terminal_averaged()) {
                    let d = xb.sub(&SpectralField::slow(rb.coeffs()[..n].to_vec()));
                    avg.push(weighted_norm_sq(&eigs[..n], gamma, d.coeffs()).sqrt());
                }
            }
            rows.push(GalerkinRow {
                n,
                gamma,
                projected: Estimate::from_samples(&proj),
                full: Estimate::from_samples(&full),
                averaged: (!avg.is_empty()).then(|| Estimate::from_samples(&avg)),
            });
        }
    }

    let exact_zero = rows.iter().all(|r| r.projected.mean == 0.0);
    let monotone = g.gammas.iter().all(|&gamma| {
        let rs: Vec<&GalerkinRow> = rows.iter().filter(|r| r.gamma == gamma).collect();
        rs.windows(2).all(|w| {
            w[1].full.mean < w[0].full.mean && (w[1].projected.mean < w[0].projected.mean || w[0].projected.mean == 0.0)
        })
    });
    let status = if cfg.model.build(1, Some(grid))?.linear.is_some() {
        Status::from_bool(exact_zero)
    } else {
        Status::from_bool(monotone)
    };
    Ok(GalerkinReport {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        seed,
        timestamp: timestamp(),
        n_ref,
        eps: g.eps,
        rows,
        monotone,
        exact_zero,
        status,
    })
}
