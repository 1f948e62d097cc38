//! Fine radially symmetric solution used as the reference for 3D runs.

use sipf::diagnostics::{bin_radial_grid, integral_m_numerical, integral_m_reference, Snapshot};
use sipf::params::{InitialCondition, SimulationParams};
use sipf::radial::radial_run;

fn main() -> sipf::Result<()> {
    let p = SimulationParams::default();
    let ic = InitialCondition::single_centered();
    let snaps = radial_run(&p, &ic, 1.0, 1.0 / 801.0, 1e-3, &[0.0, 1.0, 2.0, 4.0])?;
    for g in &snaps {
        let prof = bin_radial_grid(g, &g.rho, 0.02, 1.0)?;
        let m = integral_m_numerical(Snapshot::Radial(g));
        println!(
            "t = {:.0}: rho peak at r = {:.2}, mass {:.6e}, int m {m:.6e} (closed form {:.6e})",
            g.time,
            prof.peak_radius(),
            g.mass(),
            integral_m_reference(g.time, &p, &ic)
        );
    }
    snaps.last().unwrap().write_csv(std::io::stdout().lock())?;
    Ok(())
}
