//! Finite-difference baseline on the unit square/cube `[-1/2, 1/2]^dim`.
//!
//! Vertex grid with spacing `1/(n-1)`. Zero normal derivatives come from
//! ghost values mirrored about the boundary nodes; multiplying each row by
//! the trapezoid weight of its node makes the diffusion matrix symmetric, so
//! the implicit solves are Jacobi-preconditioned conjugate gradients and the
//! weighted mass `sum w_i rho_i` is conserved to solver tolerance.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{steps_for, InitialCondition, SimulationParams, Vec3};

pub const CG_TOLERANCE: f64 = 1e-10;
const CG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub dim: usize,
    pub n: usize,
    pub dx: f64,
    pub time: f64,
    pub rho: Vec<f64>,
    pub f: Vec<f64>,
    pub m: Vec<f64>,
}

impl GridField {
    pub fn uniform(dim: usize, n: usize, rho: f64, f: f64, m: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(crate::error::invalid("dim", format!("grid dimension must be 2 or 3, got {dim}")));
        }
        if n < 3 {
            return Err(crate::error::invalid("n", format!("need at least 3 points per side, got {n}")));
        }
        let len = n.pow(dim as u32);
        Ok(Self {
            dim,
            n,
            dx: 1.0 / (n - 1) as f64,
            time: 0.0,
            rho: vec![rho; len],
            f: vec![f; len],
            m: vec![m; len],
        })
    }

    /// Initial data sampled at the nodes; in 2D the blobs are cut by `z = 0`.
    pub fn initial(ic: &InitialCondition, epsilon: f64, dim: usize, n: usize) -> Result<Self> {
        ic.validate(1.0)?;
        let mut g = Self::uniform(dim, n, 0.0, 1.0, 0.0)?;
        for i in 0..g.len() {
            let r = ic.rho0(epsilon, g.node(i));
            g.rho[i] = r;
            g.f[i] = 1.0 - 0.5 * r;
            g.m[i] = 0.5 * r;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// `-1/2 + a dx`, written so that mirrored nodes have exactly opposite
    /// coordinates.
    pub fn coordinate(&self, a: usize) -> f64 {
        (2 * a as i64 - (self.n as i64 - 1)) as f64 / (2 * (self.n - 1)) as f64
    }

    /// Node position for a flat x-fastest index (`z = 0` in 2D).
    pub fn node(&self, idx: usize) -> Vec3 {
        let n = self.n;
        let c = if self.dim == 3 { self.coordinate(idx / (n * n)) } else { 0.0 };
        [self.coordinate(idx % n), self.coordinate((idx / n) % n), c]
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    /// Plain cell sum `sum rho_i dx^dim`.
    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.cell_volume()
    }

    fn same_shape(&self, other: &GridField) -> Result<()> {
        if self.dim != other.dim || self.n != other.n {
            return Err(Error::GridMismatch {
                left: format!("{}^{}", self.n, self.dim),
                right: format!("{}^{}", other.n, other.dim),
            });
        }
        Ok(())
    }

    /// Binary snapshot: header line `dim n dx time`, then little-endian f64
    /// values in x-fastest order.
    pub fn write_binary<W: Write>(&self, mut w: W, values: &[f64]) -> std::io::Result<()> {
        writeln!(w, "{} {} {} {}", self.dim, self.n, self.dx, self.time)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a binary snapshot into `(dim, n, dx, time, values)`.
    pub fn read_binary<R: BufRead>(mut r: R) -> Result<(usize, usize, f64, f64, Vec<f64>)> {
        let mut head = String::new();
        r.read_line(&mut head)?;
        let bad = || Error::Config(format!("grid snapshot header `{}`", head.trim()));
        let t: Vec<&str> = head.split_whitespace().collect();
        if t.len() != 4 {
            return Err(bad());
        }
        let dim: usize = t[0].parse().map_err(|_| bad())?;
        let n: usize = t[1].parse().map_err(|_| bad())?;
        let dx: f64 = t[2].parse().map_err(|_| bad())?;
        let time: f64 = t[3].parse().map_err(|_| bad())?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * n.pow(dim as u32) {
            return Err(bad());
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dim, n, dx, time, values))
    }

    /// CSV of the three fields along the x axis through the center node.
    pub fn write_axis_slice_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n;
        let mid = n / 2;
        let base = if self.dim == 3 { mid * n * n + mid * n } else { mid * n };
        writeln!(w, "x,rho,f,m")?;
        for a in 0..n {
            let i = base + a;
            writeln!(w, "{},{},{},{}", self.coordinate(a), self.rho[i], self.f[i], self.m[i])?;
        }
        Ok(())
    }
}

/// Geometry shared by the stencil kernels.
#[derive(Clone, Copy)]
struct Stencil {
    dim: usize,
    n: usize,
    inv_dx2: f64,
}

impl Stencil {
    fn of(g: &GridField) -> Self {
        Self {
            dim: g.dim,
            n: g.n,
            inv_dx2: 1.0 / (g.dx * g.dx),
        }
    }

    fn plane(&self) -> usize {
        self.n.pow(self.dim as u32 - 1)
    }

    fn strides(&self) -> [usize; 3] {
        [1, self.n, self.n * self.n]
    }

    #[inline]
    fn edge_weight(&self, a: usize) -> f64 {
        if a == 0 || a == self.n - 1 {
            0.5
        } else {
            1.0
        }
    }

    /// Coordinates of a flat index (third is zero in 2D).
    #[inline]
    fn coords(&self, i: usize) -> [usize; 3] {
        let n = self.n;
        [i % n, (i / n) % n, if self.dim == 3 { i / (n * n) } else { 0 }]
    }

    /// Trapezoid weight of a node and of its faces normal to each axis.
    #[inline]
    fn weights(&self, c: [usize; 3]) -> (f64, [f64; 3]) {
        let w: [f64; 3] = [
            self.edge_weight(c[0]),
            self.edge_weight(c[1]),
            if self.dim == 3 { self.edge_weight(c[2]) } else { 1.0 },
        ];
        (w[0] * w[1] * w[2], [w[1] * w[2], w[0] * w[2], w[0] * w[1]])
    }

    fn node_weights(&self) -> Vec<f64> {
        (0..self.n.pow(self.dim as u32)).map(|i| self.weights(self.coords(i)).0).collect()
    }

    /// `out = W (1 + decay dt) u - dt kappa W L u`, a symmetric positive
    /// definite operator.
    fn apply(&self, u: &[f64], out: &mut [f64], kappa_dt: f64, shift: f64) {
        let plane = self.plane();
        let st = self.strides();
        out.par_chunks_mut(plane).enumerate().for_each(|(p, chunk)| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = p * plane + k;
                let c = self.coords(i);
                let (w, fw) = self.weights(c);
                let ui = u[i];
                let mut lap = 0.0;
                for d in 0..self.dim {
                    let s = st[d];
                    let mut acc = 0.0;
                    if c[d] > 0 {
                        acc += u[i - s] - ui;
                    }
                    if c[d] + 1 < self.n {
                        acc += u[i + s] - ui;
                    }
                    lap += fw[d] * acc;
                }
                *o = w * shift * ui - kappa_dt * self.inv_dx2 * lap;
            }
        });
    }

    fn diagonal(&self, kappa_dt: f64, shift: f64) -> Vec<f64> {
        (0..self.n.pow(self.dim as u32))
            .map(|i| {
                let c = self.coords(i);
                let (w, fw) = self.weights(c);
                let mut nb = 0.0;
                for d in 0..self.dim {
                    let k = usize::from(c[d] > 0) + usize::from(c[d] + 1 < self.n);
                    nb += fw[d] * k as f64;
                }
                w * shift + kappa_dt * self.inv_dx2 * nb
            })
            .collect()
    }

    /// Weighted divergence of the centered face flux `gamma rho_face grad f`.
    fn advection_divergence(&self, rho: &[f64], f: &[f64], gamma: f64, dx: f64) -> Vec<f64> {
        let st = self.strides();
        let len = rho.len();
        let mut div = vec![0.0; len];
        let plane = self.plane();
        div.par_chunks_mut(plane).enumerate().for_each(|(p, chunk)| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = p * plane + k;
                let c = self.coords(i);
                let (_, fw) = self.weights(c);
                let mut acc = 0.0;
                for d in 0..self.dim {
                    let s = st[d];
                    if c[d] + 1 < self.n {
                        let j = i + s;
                        acc += fw[d] * 0.5 * (rho[i] + rho[j]) * (f[j] - f[i]);
                    }
                    if c[d] > 0 {
                        let j = i - s;
                        acc -= fw[d] * 0.5 * (rho[i] + rho[j]) * (f[i] - f[j]);
                    }
                }
                *o = gamma * acc / (dx * dx);
            }
        });
        div
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_chunks(4096)
        .zip(b.par_chunks(4096))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Preconditioned conjugate gradients for `A x = b`, starting from `x`.
fn pcg(st: &Stencil, kappa_dt: f64, shift: f64, b: &[f64], x: &mut [f64]) -> Result<usize> {
    let diag = st.diagonal(kappa_dt, shift);
    let len = b.len();
    let mut r = vec![0.0; len];
    st.apply(x, &mut r, kappa_dt, shift);
    r.par_iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; len];
    for it in 0..CG_MAX_ITER {
        let res = dot(&r, &r).sqrt() / bnorm;
        if res <= CG_TOLERANCE {
            return Ok(it);
        }
        st.apply(&p, &mut ap, kappa_dt, shift);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
        z.par_iter_mut().zip(&r).zip(&diag).for_each(|((z, r), d)| *z = r / d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    let residual = dot(&r, &r).sqrt() / bnorm;
    Err(Error::SolverDiverged {
        residual,
        iterations: CG_MAX_ITER,
    })
}

/// Solves `(1 + decay dt) u - dt kappa L u = rhs` on the grid of `g`.
pub fn implicit_diffusion(g: &GridField, kappa: f64, decay: f64, dt: f64, rhs: &[f64], guess: &[f64]) -> Result<Vec<f64>> {
    let st = Stencil::of(g);
    let w = st.node_weights();
    let b: Vec<f64> = rhs.iter().zip(&w).map(|(r, w)| r * w).collect();
    let mut x = guess.to_vec();
    pcg(&st, kappa * dt, 1.0 + decay * dt, &b, &mut x)?;
    Ok(x)
}

/// One step: implicit `m`, explicit `f`, then implicit `rho` with explicit
/// centered conservative advection along the old `f`.
pub fn fdm_step(g: &GridField, p: &SimulationParams) -> Result<GridField> {
    let dt = p.dt;
    let st = Stencil::of(g);
    let w = st.node_weights();

    let rhs_m: Vec<f64> = g.m.iter().zip(&g.rho).zip(&w).map(|((m, r), w)| w * (m + dt * p.alpha * r)).collect();
    let mut m = g.m.clone();
    pcg(&st, p.d_m * dt, 1.0 + p.beta * dt, &rhs_m, &mut m)?;

    let f: Vec<f64> = g.f.iter().zip(&g.m).map(|(f, m)| f * (1.0 - p.eta * m * dt)).collect();

    let mut rhs_rho: Vec<f64> = g.rho.iter().zip(&w).map(|(r, w)| w * r).collect();
    if p.gamma != 0.0 {
        let div = st.advection_divergence(&g.rho, &g.f, p.gamma, g.dx);
        rhs_rho.iter_mut().zip(&div).for_each(|(r, d)| *r -= dt * d);
    }
    let mut rho = g.rho.clone();
    pcg(&st, p.d_n * dt, 1.0, &rhs_rho, &mut rho)?;

    Ok(GridField {
        dim: g.dim,
        n: g.n,
        dx: g.dx,
        time: g.time + dt,
        rho,
        f,
        m,
    })
}

/// Runs `fdm_step` from the initial data on an `n^dim` grid and returns
/// copies at `snapshot_times` (in the order given).
pub fn fdm_run(
    params: &SimulationParams,
    ic: &InitialCondition,
    n: usize,
    snapshot_times: &[f64],
) -> Result<Vec<GridField>> {
    fdm_run_with(params, ic, n, snapshot_times, |_| {})
}

/// As [`fdm_run`], calling `observe` on every state including the initial one.
pub fn fdm_run_with(
    params: &SimulationParams,
    ic: &InitialCondition,
    n: usize,
    snapshot_times: &[f64],
    mut observe: impl FnMut(&GridField),
) -> Result<Vec<GridField>> {
    params.validate()?;
    let targets = snapshot_times
        .iter()
        .map(|&t| steps_for(t, params.dt))
        .collect::<Result<Vec<_>>>()?;
    let last = targets.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Option<GridField>> = vec![None; targets.len()];
    let mut g = GridField::initial(ic, params.epsilon, params.dim, n)?;
    for step in 0..=last {
        observe(&g);
        for (k, &t) in targets.iter().enumerate() {
            if t == step {
                let mut snap = g.clone();
                snap.time = step as f64 * params.dt;
                out[k] = Some(snap);
            }
        }
        if step < last {
            g = fdm_step(&g, params)?;
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every target visited")).collect())
}

/// Signed relative drift of the plain cell sum of `rho`.
pub fn conservation_error(g0: &GridField, gt: &GridField) -> Result<f64> {
    g0.same_shape(gt)?;
    let s0: f64 = g0.rho.iter().sum();
    let st: f64 = gt.rho.iter().sum();
    if s0 == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((st - s0) / s0)
}
