use sipf::fdm::{conservation_error, fdm_run, GridField};
use sipf::params::{InitialCondition, SimulationParams};

fn params_2d() -> SimulationParams {
    SimulationParams { dim: 2, ..SimulationParams::default() }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

fn radius(g: &GridField, i: usize) -> f64 {
    let x = g.node(i);
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[test]
fn two_dimensional_blob_develops_a_ring() {
    let s = fdm_run(&params_2d(), &InitialCondition::single_centered(), 81, &[0.0, 2.0]).unwrap();
    let g = &s[1];
    let i = argmax(&g.rho);
    assert!(radius(g, i) > 0.05, "maximum at r = {}", radius(g, i));
    let centre = argmax(&s[0].rho);
    assert!(g.rho[i] > g.rho[centre]);
    // ECM is consumed where the cells are, never created
    assert!(g.f.iter().all(|&f| f > 0.0 && f <= 1.0 + 1e-12));
    assert!(g.f[centre] < 0.5);
}

#[test]
fn two_dimensional_mass_drift_is_tiny() {
    let s = fdm_run(&params_2d(), &InitialCondition::single_centered(), 61, &[0.0, 1.0]).unwrap();
    assert!(conservation_error(&s[0], &s[1]).unwrap().abs() < 1e-4);
}

#[test]
fn three_dimensional_run_stays_symmetric() {
    let p = SimulationParams { t_final: 0.5, ..SimulationParams::default() };
    let s = fdm_run(&p, &InitialCondition::single_centered(), 21, &[0.5]).unwrap();
    let g = &s[0];
    let n = g.n;
    let at = |a: usize, b: usize, c: usize| g.rho[(a * n + b) * n + c];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let v = at(a, b, c);
                for w in [at(b, a, c), at(c, b, a), at(n - 1 - a, b, c)] {
                    assert!((v - w).abs() <= 1e-12 * v.abs().max(1e-3));
                }
            }
        }
    }
}

#[test]
fn rejects_one_dimensional_grids() {
    assert!(GridField::uniform(1, 11, 0.0, 1.0, 0.0).is_err());
    assert!(GridField::uniform(3, 2, 0.0, 1.0, 0.0).is_err());
}
