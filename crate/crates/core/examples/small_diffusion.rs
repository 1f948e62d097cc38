//! Small cell motility: the finite-difference density undershoots below zero
//! while particle densities cannot.

use sipf::diagnostics::{bin_particles_radially, bin_radial_grid};
use sipf::fdm::fdm_run_with;
use sipf::params::{InitialCondition, SimulationParams};
use sipf::radial::radial_run;
use sipf::sipf::{run, GradMMode};

fn main() -> sipf::Result<()> {
    let p = SimulationParams { d_n: 0.0002, particles: 5000, ..SimulationParams::default() };
    let ic = InitialCondition::single_centered();
    let mut first_negative = None;
    let mut min_rho = f64::MAX;
    fdm_run_with(&p, &ic, 41, &[p.t_final], |g| {
        let lo = g.rho.iter().copied().fold(f64::MAX, f64::min);
        min_rho = min_rho.min(lo);
        if lo < 0.0 && first_negative.is_none() {
            first_negative = Some(g.time);
        }
    })?;
    println!("finite difference 41^3: min rho {min_rho:.3e}, first negative at {first_negative:?}");
    let reference = radial_run(&p, &ic, 1.0, 1.0 / 801.0, 1e-3, &[p.t_final])?.pop().unwrap();
    let rp = bin_radial_grid(&reference, &reference.rho, 0.02, 1.0)?;
    let s = run(&p, &ic, GradMMode::Paper, &[p.t_final])?.pop().unwrap();
    let sp = bin_particles_radially(&s.particles, [0.0; 3], 0.02, 1.0)?;
    println!("peak radius: radial {:.2}, particles {:.2}", rp.peak_radius(), sp.peak_radius());
    Ok(())
}
