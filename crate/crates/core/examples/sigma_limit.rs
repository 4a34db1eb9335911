//! Diffusion coefficient of the Gaussian deviation limit, estimated from
//! products of the fluctuation and its corrector under the invariant
//! measure.
//!
//! ```bash
//! cargo run --release --example sigma_limit
//! ```

use mspde::deviation::{estimate_sigma, SigmaBudget};
use mspde::models::linear_bench;
use mspde::spectral::SpectralField;
use nalgebra::DMatrix;

fn main() -> mspde::Result<()> {
    let n = 4;
    let bench = linear_bench(n, &[1.0, 0.5, 1.0 / 3.0], DMatrix::zeros(n, n), &[0.0; 4])?;
    let x = SpectralField::slow(vec![0.5, 0.25, 0.1, 0.0]);
    let est = estimate_sigma(bench.model(), &bench, &x, &SigmaBudget::for_model(bench.model()), 5)?;
    let exact = bench.sigma();
    println!("k   sigma_kk     closed form   rel. error");
    for k in 0..n {
        let (a, b) = (est.sigma[(k, k)], exact[(k, k)]);
        let rel = if b > 0.0 { format!("{:.3}", (a - b).abs() / b) } else { "-".into() };
        println!("{}   {a:.5}      {b:.5}       {rel}", k + 1);
    }
    let sym = est.symmetrized();
    let worst = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| sym[(i, j)].abs() / est.stderr[(i, j)].max(1e-300))
        .fold(0.0, f64::max);
    println!("largest off-diagonal |entry| / SE: {worst:.2}");
    println!("clipped mass {:.2e} of trace {:.4e}", est.clipped_mass, est.trace);
    Ok(())
}
