//! Feynman-Kac solution of the fast Poisson equation: a scalar
//! Ornstein-Uhlenbeck oracle, the generator residual, and the vector
//! corrector of the linear bench.
//!
//! ```bash
//! cargo run --release --example poisson_corrector
//! ```

use std::sync::Arc;

use mspde::averaging::{DeltaF, FnObservable};
use mspde::models::LinearBench;
use mspde::poisson::{poisson_residual, solve_poisson, solve_poisson_vector, PoissonBudget, PoissonProblem};
use mspde::spectral::{NoiseSpectrum, OperatorSpectrum, SpectralField};
use nalgebra::DMatrix;

fn main() -> mspde::Result<()> {
    // dy = -y dt + sqrt(2) dW; phi(y) = y has psi(y) = y
    let ou = LinearBench::with_spectra(
        OperatorSpectrum::dirichlet_laplacian(1),
        OperatorSpectrum::dirichlet_laplacian(1),
        NoiseSpectrum::from_values(vec![1.0])?,
        NoiseSpectrum::from_values(vec![2.0])?,
        &[],
        DMatrix::zeros(1, 1),
        &[0.0],
    )?;
    let model = ou.model();
    let phi = FnObservable::new(1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0]);
    let problem = PoissonProblem::new(model, Arc::new(phi));
    let x = SpectralField::slow(vec![0.0]);
    let budget = PoissonBudget::for_model(model).with_replicas(4096);
    let sol = solve_poisson(&problem, &x, &SpectralField::fast(vec![1.5]), &budget, 1)?;
    println!(
        "scalar OU: psi(1.5) = {:.4} +- {:.4} (exact 1.5), horizon {:.2}",
        sol.scalar(),
        sol.stderr[0],
        sol.horizon
    );

    let exact = |y: &[f64]| Ok(y[0]);
    let r = poisson_residual(&problem, &exact, &x, &SpectralField::fast(vec![1.5]), 1e-3)?;
    println!("residual of the exact solution {:.2e}", r.residual);
    let wrong = |y: &[f64]| Ok(2.0 * y[0]);
    let r = poisson_residual(&problem, &wrong, &x, &SpectralField::fast(vec![1.5]), 1e-3)?;
    println!("residual of psi = 2y           {:.2e}", r.residual);

    let bench = mspde::models::linear_bench(4, &[1.0, 0.5], DMatrix::identity(4, 4) * 0.5, &[0.0; 4])?;
    let x = SpectralField::slow(vec![0.3, -0.2, 0.1, 0.05]);
    let y = SpectralField::fast(vec![0.8, -0.4, 0.2, 0.0]);
    let phi = DeltaF::new(bench.model(), &bench, x.coeffs())?;
    let problem = PoissonProblem::new(bench.model(), Arc::new(phi));
    let sol = solve_poisson_vector(&problem, &x, &y, &PoissonBudget::for_model(bench.model()), 2)?;
    let cf = bench.corrector(x.coeffs(), y.coeffs());
    println!("linear bench corrector:");
    for k in 0..4 {
        println!("  k={}  {:+.4} +- {:.4}   closed form {:+.4}", k + 1, sol.value[k], sol.stderr[k], cf[k]);
    }
    Ok(())
}
