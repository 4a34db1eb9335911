//! Trace-class and integrability diagnostics, growth sampling of the
//! reaction maps, and the uniform-in-eps moment sweep.
//!
//! ```bash
//! cargo run --release --example assumption_check -- [linear|nemytskii|holder]
//! ```

use mspde::experiments::{run_assumption_check, Bench, Profile, SimConfig};

fn main() -> mspde::Result<()> {
    let mut cfg = SimConfig::profile(Profile::Desk);
    cfg.model.bench = match std::env::args().nth(1).as_deref() {
        Some("nemytskii") => Bench::Nemytskii,
        Some("holder") => Bench::Holder,
        _ => Bench::Linear,
    };
    let r = run_assumption_check(&cfg)?;
    for s in [&r.trace.tr_q1, &r.trace.tr_q2, &r.trace.tr_a_q1] {
        println!("{:<10} partial sum {:.6}  tail ratio {:.3}  {:?}", s.name, s.partial_full, s.tail_ratio, s.status);
    }
    println!("Upsilon integrand ~ t^{:.2} near 0 (warn: {})", r.trace.upsilon.local_power, r.trace.upsilon.warn);
    for g in &r.growth {
        println!("{}: worst growth ratio {:.3} (declared {}), guarantee {}", g.map, g.worst_ratio, g.growth_constant, g.scheme_guarantee);
    }
    for m in &r.moments {
        println!(
            "eps {:<10} sup_t E|X_t|^2 = {:.4} +- {:.4}   E|X_T|^2 = {:.4} +- {:.4}",
            m.eps,
            m.sup_second_moment.mean,
            m.sup_second_moment.stderr,
            m.terminal_second_moment.mean,
            m.terminal_second_moment.stderr
        );
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
    println!("status {:?}", r.status);
    Ok(())
}
