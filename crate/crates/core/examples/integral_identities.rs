//! Time series of the two integral identities for all three solvers.

use sipf::experiment::{run_identity, ExperimentConfig, SolverKind};

fn main() -> sipf::Result<()> {
    for solver in [SolverKind::Radial, SolverKind::Fdm, SolverKind::Sipf] {
        let mut cfg = ExperimentConfig::new(solver);
        cfg.params.t_final = 2.0;
        cfg.params.particles = 4000;
        cfg.fdm.n = 31;
        let outcome = run_identity(&cfg, "out/identity".as_ref())?;
        for (label, series) in &outcome.identities {
            for pt in series.iter().step_by(50) {
                println!(
                    "{label:>6} t = {:4.2}  int m {:.5e} (err {:.1e})  int ln f {:.5e} / {:.5e}",
                    pt.t,
                    pt.int_m,
                    pt.error_m(),
                    pt.int_lnf.unwrap_or(f64::NAN),
                    pt.int_lnf_reference.unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}
