//! Spherically symmetric reduction of the haptotaxis system on `[0, R]`.
//!
//! Cell-centered grid, conservative `(1/r^2) d/dr (r^2 d/dr)` fluxes, backward
//! Euler for diffusion and explicit advection / degradation.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::params::{steps_for, InitialCondition, SimulationParams};
use crate::quad;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub dr: f64,
    pub radius: f64,
    pub time: f64,
    pub rho: Vec<f64>,
    pub f: Vec<f64>,
    pub m: Vec<f64>,
}

impl RadialGrid {
    /// A grid of `n_r` cells on `[0, radius]` with constant fields.
    pub fn uniform(n_r: usize, radius: f64, rho: f64, f: f64, m: f64) -> Self {
        Self {
            dr: radius / n_r as f64,
            radius,
            time: 0.0,
            rho: vec![rho; n_r],
            f: vec![f; n_r],
            m: vec![m; n_r],
        }
    }

    /// Initial data of a single blob centered at the origin, sampled at cell
    /// centers. The cell cut by the truncation radius holds its exact shell
    /// average so the discrete mass matches the continuous one.
    pub fn initial(ic: &InitialCondition, epsilon: f64, n_r: usize, radius: f64) -> Result<Self> {
        if ic.blobs.len() != 1 || ic.blobs[0].center.iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidInitialCondition(
                "radial reduction needs exactly one blob at the origin".into(),
            ));
        }
        if !(radius > ic.truncation_radius) {
            return Err(Error::InvalidInitialCondition(format!(
                "radial extent {radius} does not contain the blob"
            )));
        }
        let w = ic.blobs[0].weight;
        let rt = ic.truncation_radius;
        let mut g = Self::uniform(n_r, radius, 0.0, 1.0, 0.0);
        let dr = g.dr;
        for i in 0..n_r {
            let (lo, hi) = (i as f64 * dr, (i + 1) as f64 * dr);
            let r = g.r(i);
            let gauss = if hi <= rt {
                (-r * r / epsilon).exp()
            } else if lo < rt {
                let shell = 4.0 * PI * quad::integrate(|s| s * s * (-s * s / epsilon).exp(), lo, rt, 1e-13);
                shell / (4.0 * PI * r * r * dr)
            } else {
                0.0
            };
            g.rho[i] = w * gauss;
            g.m[i] = 0.5 * w * gauss;
            g.f[i] = 1.0 - 0.5 * w * gauss;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Cell center `(i + 1/2) dr`.
    #[inline]
    pub fn r(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dr
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.r(i)).collect()
    }

    /// `sum 4 pi r_i^2 u_i dr`.
    pub fn shell_sum(&self, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, v)| 4.0 * PI * self.r(i).powi(2) * v * self.dr)
            .sum()
    }

    pub fn mass(&self) -> f64 {
        self.shell_sum(&self.rho)
    }

    /// Linear interpolation in `r`, constant beyond the first/last center.
    pub fn interpolate(u: &[f64], dr: f64, r: f64) -> f64 {
        let s = r / dr - 0.5;
        if s <= 0.0 {
            return u[0];
        }
        let i = s.floor() as usize;
        if i + 1 >= u.len() {
            return u[u.len() - 1];
        }
        let t = s - i as f64;
        u[i] * (1.0 - t) + u[i + 1] * t
    }

    /// CSV with a `# time=.. dr=..` line followed by columns `r,rho,f,m`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# time={} dr={}", self.time, self.dr)?;
        writeln!(w, "r,rho,f,m")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{},{}", self.r(i), self.rho[i], self.f[i], self.m[i])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let bad = |what: &str| Error::Config(format!("radial csv: {what}"));
        let head = lines.next().ok_or_else(|| bad("empty"))??;
        let mut time = None;
        let mut dr = None;
        for tok in head.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("time=") {
                time = v.parse().ok();
            } else if let Some(v) = tok.strip_prefix("dr=") {
                dr = v.parse().ok();
            }
        }
        let (time, dr): (f64, f64) = (time.ok_or_else(|| bad("missing time"))?, dr.ok_or_else(|| bad("missing dr"))?);
        lines.next();
        let (mut rho, mut f, mut m) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad(&line)))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(bad(&line));
            }
            rho.push(v[1]);
            f.push(v[2]);
            m.push(v[3]);
        }
        Ok(Self {
            dr,
            radius: dr * rho.len() as f64,
            time,
            rho,
            f,
            m,
        })
    }
}

/// Solves `a_i u_{i-1} + b_i u_i + c_i u_{i+1} = d_i` (Thomas algorithm).
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut piv = b[0];
    if piv == 0.0 {
        return Err(Error::Tridiagonal { row: 0 });
    }
    cp[0] = c[0] / piv;
    dp[0] = d[0] / piv;
    for i in 1..n {
        piv = b[i] - a[i] * cp[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::Tridiagonal { row: i });
        }
        cp[i] = c[i] / piv;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / piv;
    }
    let mut x = dp;
    for i in (0..n - 1).rev() {
        x[i] -= cp[i] * x[i + 1];
    }
    Ok(x)
}

/// Backward-Euler solve of `(1 + decay dt) u - dt kappa D u = rhs` with the
/// conservative spherical Laplacian `D` and zero flux at both ends.
fn implicit_diffusion(g: &RadialGrid, kappa: f64, decay: f64, dt: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let ri2 = g.r(i).powi(2) * g.dr * g.dr;
        let wl = if i == 0 { 0.0 } else { (i as f64 * g.dr).powi(2) / ri2 };
        let wr = if i + 1 == n { 0.0 } else { ((i + 1) as f64 * g.dr).powi(2) / ri2 };
        a[i] = -dt * kappa * wl;
        c[i] = -dt * kappa * wr;
        b[i] = 1.0 + dt * decay + dt * kappa * (wl + wr);
    }
    solve_tridiagonal(&a, &b, &c, rhs)
}

/// One time step: `m` (implicit diffusion and decay, explicit production),
/// then `f <- f (1 - eta m dt)` with the old `m`, then `rho` (implicit
/// diffusion, explicit centered advection along the old `f`).
pub fn radial_step(g: &RadialGrid, params: &SimulationParams) -> Result<RadialGrid> {
    radial_step_dt(g, params, params.dt)
}

fn radial_step_dt(g: &RadialGrid, p: &SimulationParams, dt: f64) -> Result<RadialGrid> {
    let n = g.len();
    let rhs_m: Vec<f64> = (0..n).map(|i| g.m[i] + dt * p.alpha * g.rho[i]).collect();
    let m = implicit_diffusion(g, p.d_m, p.beta, dt, &rhs_m)?;

    let f: Vec<f64> = (0..n).map(|i| g.f[i] * (1.0 - p.eta * g.m[i] * dt)).collect();

    // r^2-weighted face fluxes; both ends carry zero flux
    let mut flux = vec![0.0; n + 1];
    for i in 0..n - 1 {
        let rf = (i + 1) as f64 * g.dr;
        let rho_face = 0.5 * (g.rho[i] + g.rho[i + 1]);
        flux[i + 1] = rf * rf * p.gamma * rho_face * (g.f[i + 1] - g.f[i]) / g.dr;
    }
    let rhs_rho: Vec<f64> = (0..n)
        .map(|i| g.rho[i] - dt * (flux[i + 1] - flux[i]) / (g.r(i).powi(2) * g.dr))
        .collect();
    let rho = implicit_diffusion(g, p.d_n, 0.0, dt, &rhs_rho)?;

    Ok(RadialGrid {
        dr: g.dr,
        radius: g.radius,
        time: g.time + dt,
        rho,
        f,
        m,
    })
}

/// Integrates from the initial blob with cell width `dr` and step `dt`
/// (overriding `params.dt`), returning copies at `snapshot_times`.
pub fn radial_run(
    params: &SimulationParams,
    ic: &InitialCondition,
    radius: f64,
    dr: f64,
    dt: f64,
    snapshot_times: &[f64],
) -> Result<Vec<RadialGrid>> {
    let n_r = (radius / dr).round() as usize;
    if n_r < 2 {
        return Err(crate::error::invalid("dr", format!("needs at least two cells, got {n_r}")));
    }
    let p = SimulationParams { dt, ..params.clone() };
    let targets = snapshot_times
        .iter()
        .map(|&t| steps_for(t, dt))
        .collect::<Result<Vec<_>>>()?;
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..targets.len()).collect();
        o.sort_by_key(|&i| targets[i]);
        o
    };
    let last = targets.iter().copied().max().unwrap_or(0);
    let mut out = vec![None; targets.len()];
    let mut g = RadialGrid::initial(ic, p.epsilon, n_r, radius)?;
    let mut next = 0;
    for step in 0..=last {
        while next < order.len() && targets[order[next]] == step {
            let mut snap = g.clone();
            snap.time = step as f64 * dt;
            out[order[next]] = Some(snap);
            next += 1;
        }
        if step < last {
            g = radial_step_dt(&g, &p, dt)?;
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every target visited")).collect())
}
