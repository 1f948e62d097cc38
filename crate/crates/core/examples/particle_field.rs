//! Particle-field run of the single-blob problem, printing the integral
//! identity and the radial density profile.
//!
//!     cargo run --release --example particle_field -- [P] [T] [paper|spectral]

use sipf::diagnostics::{bin_particles_radially, integral_m_numerical, integral_m_reference, Snapshot};
use sipf::params::{InitialCondition, SimulationParams};
use sipf::sipf::{run, GradMMode};

fn main() -> sipf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut p = SimulationParams { particles: 4000, t_final: 1.0, ..SimulationParams::default() };
    if let Some(v) = args.first() {
        p.particles = v.parse().expect("particle count");
    }
    if let Some(v) = args.get(1) {
        p.t_final = v.parse().expect("final time");
    }
    let mode: GradMMode = args.get(2).map_or(Ok(GradMMode::Paper), |s| s.parse())?;
    let ic = InitialCondition::single_centered();
    let start = std::time::Instant::now();
    let s = run(&p, &ic, mode, &[p.t_final])?.pop().unwrap();
    println!("P = {}, H = {}, dt = {}, T = {} ({:.1} s)", p.particles, p.modes, p.dt, p.t_final, start.elapsed().as_secs_f64());
    let num = integral_m_numerical(Snapshot::Sipf { m: &s.m, f: &s.f });
    let want = integral_m_reference(p.t_final, &p, &ic);
    println!("int m = {num:.6e}, closed form {want:.6e}");
    let prof = bin_particles_radially(&s.particles, [0.0; 3], 0.02, 0.4)?;
    println!("   r      rho");
    for (r, v) in prof.midpoints().iter().zip(&prof.values) {
        println!("{r:6.2} {v:9.4}");
    }
    println!("peak at r = {:.2}", prof.peak_radius());
    Ok(())
}
