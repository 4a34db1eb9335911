//! Semigroup, fractional powers and the per-mode smoothing bound on the
//! Dirichlet Laplacian, checked on random inputs.
//!
//! ```bash
//! cargo run --release --example spectral_identities
//! ```

use mspde::rng::{fill_normals, stream};
use mspde::spectral::{apply_fractional_power, apply_semigroup, OperatorSpectrum, SpectralField};

fn max_rel(a: &SpectralField, b: &SpectralField) -> f64 {
    a.coeffs()
        .iter()
        .zip(b.coeffs())
        .map(|(x, y)| (x - y).abs() / x.abs().max(1e-300))
        .fold(0.0, f64::max)
}

fn main() -> mspde::Result<()> {
    let n = 32;
    let spec = OperatorSpectrum::dirichlet_laplacian(n);
    let mut rng = stream(7, &[]);
    let mut worst = [0.0f64; 2];
    for trial in 0..100 {
        let mut x = vec![0.0; n];
        fill_normals(&mut rng, &mut x);
        let x = SpectralField::slow(x);
        let (t, s) = (0.01 * trial as f64, 0.005 * (100 - trial) as f64);
        let direct = apply_semigroup(&spec, t + s, &x)?;
        let composed = apply_semigroup(&spec, t, &apply_semigroup(&spec, s, &x)?)?;
        worst[0] = worst[0].max(max_rel(&direct, &composed));

        let (g1, g2) = (0.004 * trial as f64, 0.25);
        let direct = apply_fractional_power(&spec, g1 + g2, &x)?;
        let composed = apply_fractional_power(&spec, g1, &apply_fractional_power(&spec, g2, &x)?)?;
        worst[1] = worst[1].max(max_rel(&direct, &composed));
    }
    println!("semigroup composition   max rel. error {:.2e}", worst[0]);
    println!("fractional additivity   max rel. error {:.2e}", worst[1]);

    // alpha^gamma e^{-alpha t} <= (gamma / (e t))^gamma for every mode
    let mut ratio = 0.0f64;
    for &gamma in &[0.25, 0.5, 1.0] {
        for &t in &[1e-4, 1e-2, 1.0] {
            for &a in spec.eigenvalues() {
                let lhs = a.powf(gamma) * (-a * t).exp();
                let rhs = (gamma / (std::f64::consts::E * t)).powf(gamma);
                ratio = ratio.max(lhs / rhs);
            }
        }
    }
    println!("smoothing bound         max lhs/rhs {ratio:.6}");
    Ok(())
}
