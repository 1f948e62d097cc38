//! Two clusters placed symmetrically about the origin; prints particle
//! counts along the segment joining them and writes the final particles.

use sipf::params::{InitialCondition, SimulationParams};
use sipf::sipf::{run, GradMMode};

fn main() -> sipf::Result<()> {
    let c = [0.1, 0.1, 0.1];
    let p = SimulationParams { particles: 6000, t_final: 2.0, ..SimulationParams::default() };
    let snaps = run(&p, &InitialCondition::two_clusters(c), GradMMode::Paper, &[0.5, 1.0, 2.0])?;
    for s in &snaps {
        let counts: Vec<usize> = (-6..=6)
            .map(|k| {
                let x = c.map(|v| v * k as f64 / 5.0);
                s.particles
                    .positions
                    .iter()
                    .filter(|q| (0..3).map(|d| (q[d] - x[d]).powi(2)).sum::<f64>() < 0.03f64.powi(2))
                    .count()
            })
            .collect();
        println!("t = {:.1}: {counts:?}", s.time());
    }
    let file = std::fs::File::create("two_clusters_particles.csv")?;
    snaps.last().unwrap().write_particles_csv(std::io::BufWriter::new(file))?;
    Ok(())
}
