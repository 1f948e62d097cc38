//! Two-dimensional finite-difference run: cell-number conservation and the
//! detaching invasion front.
//!
//!     cargo run --release --example finite_difference_2d -- [n]

use sipf::fdm::{conservation_error, fdm_run};
use sipf::params::{InitialCondition, SimulationParams};

fn main() -> sipf::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(101, |s| s.parse().expect("grid size"));
    let p = SimulationParams { dim: 2, ..SimulationParams::default() };
    let times = [0.0, 1.0, 2.0, 4.0];
    let snaps = fdm_run(&p, &InitialCondition::single_centered(), n, &times)?;
    for g in &snaps {
        let (i, peak) = g.rho.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let x = g.node(i);
        println!(
            "t = {:.1}: max rho {peak:.4} at r = {:.3}, min f {:.4}, conservation error {:+.2e}",
            g.time,
            x[0].hypot(x[1]),
            g.f.iter().copied().fold(f64::MAX, f64::min),
            conservation_error(&snaps[0], g)?
        );
    }
    let last = snaps.last().unwrap();
    last.write_axis_slice_csv(std::io::stdout().lock())?;
    Ok(())
}
