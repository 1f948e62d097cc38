//! One implicit MDE step from particles, checked pointwise against the
//! screened equation it solves.

use sipf::params::{InitialCondition, SimulationParams};
use sipf::sipf::{update_mde, GradMMode, SipfState};
use sipf::spectral::ScreenedKernel;

fn main() -> sipf::Result<()> {
    let p = SimulationParams::default();
    let s = SipfState::initial(&p, &InitialCondition::single_centered(), GradMMode::Paper)?;
    let next = update_mde(&s.m, &s.particles, &p)?;
    let k = ScreenedKernel::new(p.d_m, p.beta, p.dt)?;
    println!("zeta^2 = {:.1}, screening length {:.4}", k.zeta2, 1.0 / k.zeta2.sqrt());
    println!("c_000: {:.6e} -> {:.6e}", s.m.zero_mode().re, next.zero_mode().re);
    for r in [0.0, 0.02, 0.05, 0.1, 0.2] {
        println!("m({r:.2}, 0, 0): {:.5} -> {:.5}", s.m.evaluate_at([r, 0.0, 0.0]), next.evaluate_at([r, 0.0, 0.0]));
    }
    Ok(())
}
