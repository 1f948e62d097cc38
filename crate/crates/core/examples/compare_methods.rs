//! Particle-field and finite-difference errors against the radial reference,
//! on a reduced problem that finishes in well under a minute.
//!
//!     cargo run --release --example compare_methods -- [out_dir]

use sipf::experiment::{run_experiment, ExperimentConfig, Method, SolverKind};

fn main() -> sipf::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/compare".into());
    let mut cfg = ExperimentConfig::new(SolverKind::Compare);
    cfg.params.particles = 4000;
    cfg.params.modes = 16;
    cfg.params.t_final = 1.0;
    cfg.compare.methods = vec![Method::Sipf, Method::Fdm];
    cfg.fdm.n = 41;
    let outcome = run_experiment(&cfg, out.as_ref())?;
    outcome.report.write_csv(std::io::stdout().lock())?;
    for (label, series) in &outcome.identities {
        let last = series.last().unwrap();
        println!("{label}: int m error {:.2e} at t = {}", last.error_m(), last.t);
    }
    Ok(())
}
