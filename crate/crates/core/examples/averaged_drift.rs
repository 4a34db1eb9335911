//! Averaged drift by ergodic averages over the frozen fast equation, and
//! its derivative along a direction by two independent routes.
//!
//! ```bash
//! cargo run --release --example averaged_drift
//! ```

use mspde::averaging::{estimate_dx_fbar, estimate_fbar, DerivativeBudget, ErgodicBudget, ErgodicDrift};
use mspde::experiments::{Profile, SimConfig};
use mspde::models::nemytskii_bench;
use mspde::rng::stream;
use mspde::spectral::{SpectralField, Space};

fn main() -> mspde::Result<()> {
    let cfg = SimConfig::profile(Profile::Desk);
    let n = 4;
    let built = cfg.model.build(n, None)?;
    let bench = built.linear.as_ref().expect("desk profile uses the linear bench");
    let (x, _) = cfg.model.initial_state(n);

    let budget = ErgodicBudget::for_model(&built.model).with_sample_time(2048.0);
    let est = estimate_fbar(&built.model, &x, &budget, &mut stream(1, &[]))?;
    let exact = bench.fbar(x.coeffs());
    println!("linear bench, x = {:?}", x.coeffs());
    println!("  k   estimate      stderr      closed form   z");
    for k in 0..n {
        let z = (est.value[k] - exact[k]) / est.stderr[k].max(1e-300);
        println!("  {}  {:+.6}  {:.2e}   {:+.6}    {z:+.2}", k + 1, est.value[k], est.stderr[k], exact[k]);
    }

    let h = SpectralField::basis(Space::Slow, n, 1);
    let d = estimate_dx_fbar(&built.model, bench, &x, &h, &DerivativeBudget::for_model(&built.model), 2)?;
    let col = bench.dx_fbar().column(1).iter().copied().collect::<Vec<_>>();
    println!("D_x F_bar . e2: closed form {:?}", col);
    println!("  formula route  {:?}", d.formula);
    println!("  finite diff.   {:?}", d.finite_difference);
    println!("  agreement ratio {:.3} (<= 1 agrees)", d.agreement_ratio());

    let model = nemytskii_bench(n, 2 * n + 2)?;
    let provider = ErgodicDrift::new(&model, ErgodicBudget::for_model(&model), 3);
    let x = SpectralField::slow(vec![0.5, -0.2, 0.1, 0.0]);
    let mut out = vec![0.0; n];
    mspde::integrators::AveragedDrift::fbar(&provider, x.coeffs(), &mut out)?;
    println!("nemytskii bench F_bar({:?}) = {:?}", x.coeffs(), out);
    Ok(())
}
