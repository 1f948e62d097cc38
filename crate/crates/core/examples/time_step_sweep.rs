//! Error versus time step with a first-order fit. The default settings are
//! scaled down (P, H, T); pass `full` for the production-size sweep.
//!
//!     cargo run --release --example time_step_sweep -- [full]

use sipf::experiment::{run_experiment, ExperimentConfig, SolverKind, SweepAxis, SweepSettings};

fn main() -> sipf::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let mut cfg = ExperimentConfig::new(SolverKind::Sweep);
    if !full {
        cfg.params.particles = 4000;
        cfg.params.modes = 16;
        cfg.params.t_final = 1.0;
    }
    cfg.sweep = Some(SweepSettings {
        axis: SweepAxis::Dt,
        values: vec![0.1, 0.05, 0.02, 0.01],
        method: None,
        seeds: vec![],
        jobs: 1,
    });
    let outcome = run_experiment(&cfg, "out/dt-sweep".as_ref())?;
    outcome.report.write_csv(std::io::stdout().lock())?;
    println!("log-log slope {:.3}", outcome.slope.unwrap());
    Ok(())
}
