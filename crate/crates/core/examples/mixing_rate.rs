//! Exponential mixing of the frozen fast equation, measured by two coupled
//! ensembles started far apart.
//!
//! ```bash
//! cargo run --release --example mixing_rate
//! ```

use mspde::averaging::{estimate_mixing_rate, FnObservable, MixingBudget, Observable};
use mspde::experiments::{Profile, SimConfig};
use mspde::spectral::SpectralField;

fn main() -> mspde::Result<()> {
    let cfg = SimConfig::profile(Profile::Desk);
    let built = cfg.model.build(4, None)?;
    let model = &built.model;
    // the frozen mean K x / beta vanishes on mode 1 here
    let x = SpectralField::slow(vec![0.0, 0.4, -0.3, 0.1]);
    let budget = MixingBudget::for_model(model);
    let beta1 = model.op_b.smallest();

    let linear = FnObservable::new(1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0]);
    let square = FnObservable::new(1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0] * y[0]);
    let cases: [(&str, &dyn Observable, f64); 2] = [("<y,e1>", &linear, beta1), ("<y,e1>^2", &square, 2.0 * beta1)];
    for (name, phi, expect) in cases {
        let r = estimate_mixing_rate(model, &x, phi, &budget, 11)?;
        match r.rate {
            Some(rate) => println!(
                "{name:<9} rate {rate:.3} (expected {expect}), R^2 {:.3}, {} lags fitted",
                r.r_squared, r.fitted_points
            ),
            None => println!("{name:<9} no decay fitted: {}", r.note.unwrap_or_default()),
        }
    }
    Ok(())
}
