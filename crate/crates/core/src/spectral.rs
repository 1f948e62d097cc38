//! Truncated Fourier fields on the periodic cube `[-L/2, L/2)^3`.
//!
//! Coefficients use the averaging convention
//! `c_k = L^-3 int g(x) exp(-i 2 pi k.x / L) dx`, so a field's value is
//! `sum_k c_k exp(i 2 pi k.x / L)` over `k` in `{|j|, |m|, |l| <= H/2}`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rayon::prelude::*;
pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::params::{ParticleEnsemble, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    modes: usize,
    box_len: f64,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(modes: usize, box_len: f64) -> Self {
        assert!(modes >= 2 && modes.is_multiple_of(2), "H must be even, got {modes}");
        let s = modes + 1;
        Self {
            modes,
            box_len,
            coeffs: vec![Complex64::default(); s * s * s],
        }
    }

    pub fn constant(modes: usize, box_len: f64, value: f64) -> Self {
        let mut f = Self::zeros(modes, box_len);
        f.set(0, 0, 0, Complex64::new(value, 0.0));
        f
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    /// Number of retained wavenumbers per axis, `H + 1`.
    pub fn side(&self) -> usize {
        self.modes + 1
    }

    pub fn half(&self) -> i64 {
        (self.modes / 2) as i64
    }

    #[inline]
    pub fn index(&self, j: i64, m: i64, l: i64) -> usize {
        let h = self.half();
        let s = self.side();
        debug_assert!(j.abs() <= h && m.abs() <= h && l.abs() <= h);
        (((j + h) as usize) * s + (m + h) as usize) * s + (l + h) as usize
    }

    #[inline]
    pub fn get(&self, j: i64, m: i64, l: i64) -> Complex64 {
        self.coeffs[self.index(j, m, l)]
    }

    #[inline]
    pub fn set(&mut self, j: i64, m: i64, l: i64, v: Complex64) {
        let i = self.index(j, m, l);
        self.coeffs[i] = v;
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn zero_mode(&self) -> Complex64 {
        self.get(0, 0, 0)
    }

    /// All `(j, m, l)` in storage order.
    pub fn mode_indices(&self) -> impl Iterator<Item = (i64, i64, i64)> {
        let h = self.half();
        (-h..=h).flat_map(move |j| (-h..=h).flat_map(move |m| (-h..=h).map(move |l| (j, m, l))))
    }

    /// Angular wavevector `2 pi (j, m, l) / L`.
    pub fn wavevector(&self, j: i64, m: i64, l: i64) -> Vec3 {
        let u = 2.0 * PI / self.box_len;
        [u * j as f64, u * m as f64, u * l as f64]
    }

    pub fn same_grid(&self, other: &SpectralField) -> Result<()> {
        if self.modes != other.modes || self.box_len != other.box_len {
            return Err(Error::GridMismatch {
                left: format!("H={} L={}", self.modes, self.box_len),
                right: format!("H={} L={}", other.modes, other.box_len),
            });
        }
        Ok(())
    }

    /// `max_k |c_{-k} - conj(c_k)|`.
    pub fn hermitian_defect(&self) -> f64 {
        self.mode_indices()
            .map(|(j, m, l)| (self.get(-j, -m, -l) - self.get(j, m, l).conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Replaces each `c_k` by `(c_k + conj(c_{-k})) / 2`.
    pub fn enforce_hermitian(&mut self) {
        let src = self.clone();
        for (j, m, l) in src.mode_indices() {
            let v = 0.5 * (src.get(j, m, l) + src.get(-j, -m, -l).conj());
            self.set(j, m, l, v);
        }
    }

    pub fn scaled(&self, s: f64) -> SpectralField {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= s);
        out
    }

    /// Real part of the truncated series at `x`.
    pub fn evaluate_at(&self, x: Vec3) -> f64 {
        self.value_and_gradient(x).0
    }

    /// Real part of `sum_k (i k) c_k exp(i k.x)`.
    pub fn gradient_at(&self, x: Vec3) -> Vec3 {
        self.value_and_gradient(x).1
    }

    pub fn value_and_gradient(&self, x: Vec3) -> (f64, Vec3) {
        let h = self.half();
        let s = self.side();
        let ex = axis_phases(h, x[0], self.box_len, 1.0);
        let ey = axis_phases(h, x[1], self.box_len, 1.0);
        let ez = axis_phases(h, x[2], self.box_len, 1.0);
        let kw: Vec<f64> = (-h..=h).map(|k| 2.0 * PI * k as f64 / self.box_len).collect();
        let i = Complex64::new(0.0, 1.0);
        let mut v = Complex64::default();
        let mut g = [Complex64::default(); 3];
        for a in 0..s {
            let mut t = Complex64::default();
            let mut ty = Complex64::default();
            let mut tz = Complex64::default();
            for b in 0..s {
                let row = &self.coeffs[(a * s + b) * s..(a * s + b + 1) * s];
                let mut sv = Complex64::default();
                let mut sz = Complex64::default();
                for c in 0..s {
                    let term = row[c] * ez[c];
                    sv += term;
                    sz += term * kw[c];
                }
                t += ey[b] * sv;
                ty += ey[b] * sv * kw[b];
                tz += ey[b] * sz;
            }
            v += ex[a] * t;
            g[0] += ex[a] * t * kw[a];
            g[1] += ex[a] * ty;
            g[2] += ex[a] * tz;
        }
        (v.re, [(i * g[0]).re, (i * g[1]).re, (i * g[2]).re])
    }

    /// `c_k -> c_k exp(-i k.shift)`; the result evaluated at `x` equals the
    /// original evaluated at `x - shift`.
    pub fn shifted(&self, shift: Vec3) -> SpectralField {
        let h = self.half();
        let ex = axis_phases(h, shift[0], self.box_len, -1.0);
        let ey = axis_phases(h, shift[1], self.box_len, -1.0);
        let ez = axis_phases(h, shift[2], self.box_len, -1.0);
        let s = self.side();
        let mut out = self.clone();
        for a in 0..s {
            for b in 0..s {
                let exy = ex[a] * ey[b];
                for c in 0..s {
                    out.coeffs[(a * s + b) * s + c] *= exy * ez[c];
                }
            }
        }
        out
    }

    /// Real field values on the even `n`-point lattice `x_a = (a - n/2) L / n`.
    /// For `n > H` every retained mode is represented exactly; for `n == H`
    /// the `+-H/2` modes coincide on the nodes and are summed.
    pub fn sample_on_lattice(&self, n: usize) -> Vec<f64> {
        self.lattice_complex(n).into_iter().map(|c| c.re).collect()
    }

    fn lattice_complex(&self, n: usize) -> Vec<Complex64> {
        assert!(n.is_multiple_of(2) && n >= self.modes, "lattice size {n} too small for H={}", self.modes);
        let mut grid = vec![Complex64::default(); n * n * n];
        let h = self.half();
        let s = self.side();
        let bin = |k: i64| k.rem_euclid(n as i64) as usize;
        for (ia, j) in (-h..=h).enumerate() {
            for (ib, m) in (-h..=h).enumerate() {
                for (ic, l) in (-h..=h).enumerate() {
                    // exp(i 2 pi k (a - n/2) / n) = (-1)^k exp(i 2 pi k a / n)
                    let sign = if (j + m + l) % 2 == 0 { 1.0 } else { -1.0 };
                    grid[(bin(j) * n + bin(m)) * n + bin(l)] += self.coeffs[(ia * s + ib) * s + ic] * sign;
                }
            }
        }
        Fft3::new(n).inverse(&mut grid);
        grid
    }

    /// Values on the `H^3` quadrature lattice.
    pub fn inverse_transform_to_lattice(&self) -> LatticeField {
        LatticeField {
            lattice: QuadratureLattice::new(self.modes, self.box_len),
            values: self.sample_on_lattice(self.modes),
        }
    }

    /// Forward lattice DFT truncated to `|k| <= H/2` per axis. On an
    /// `H`-point lattice the shared Nyquist content is split evenly between
    /// `+H/2` and `-H/2`.
    pub fn from_lattice(values: &[f64], n: usize, modes: usize, box_len: f64) -> SpectralField {
        assert!(n.is_multiple_of(2) && n >= modes);
        assert_eq!(values.len(), n * n * n);
        let mut grid: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Fft3::new(n).forward(&mut grid);
        let mut out = SpectralField::zeros(modes, box_len);
        let h = out.half();
        let norm = 1.0 / (n * n * n) as f64;
        let bin = |k: i64| k.rem_euclid(n as i64) as usize;
        let split = |k: i64| if n == modes && k.abs() == h { 0.5 } else { 1.0 };
        for (j, m, l) in out.mode_indices().collect::<Vec<_>>() {
            let sign = if (j + m + l) % 2 == 0 { 1.0 } else { -1.0 };
            let w = norm * sign * split(j) * split(m) * split(l);
            let v = grid[(bin(j) * n + bin(m)) * n + bin(l)] * w;
            out.set(j, m, l, v);
        }
        out
    }

    /// CSV with columns `j,m,l,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "j,m,l,re,im")?;
        for (j, m, l) in self.mode_indices() {
            let c = self.get(j, m, l);
            writeln!(w, "{j},{m},{l},{},{}", c.re, c.im)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, box_len: f64) -> Result<SpectralField> {
        let mut entries = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("field csv line {}: `{line}`", lineno + 1));
            if cols.len() != 5 {
                return Err(bad());
            }
            let idx: Vec<i64> = cols[..3]
                .iter()
                .map(|s| s.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let re: f64 = cols[3].trim().parse().map_err(|_| bad())?;
            let im: f64 = cols[4].trim().parse().map_err(|_| bad())?;
            entries.push((idx[0], idx[1], idx[2], Complex64::new(re, im)));
        }
        let h = entries.iter().map(|e| e.0.abs()).max().unwrap_or(1);
        let mut f = SpectralField::zeros((2 * h).max(2) as usize, box_len);
        for (j, m, l, c) in entries {
            f.set(j, m, l, c);
        }
        Ok(f)
    }
}

/// `exp(sign * i 2 pi k x / L)` for `k = -h..=h`.
pub(crate) fn axis_phases(h: i64, x: f64, box_len: f64, sign: f64) -> Vec<Complex64> {
    let w = sign * 2.0 * PI * x / box_len;
    (-h..=h).map(|k| Complex64::from_polar(1.0, w * k as f64)).collect()
}

/// Uniform nodes `x_{j,m,l} = (j, m, l) L / n` for `j, m, l` in `[-n/2, n/2 - 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureLattice {
    pub n: usize,
    pub box_len: f64,
}

impl QuadratureLattice {
    pub fn new(n: usize, box_len: f64) -> Self {
        assert!(n.is_multiple_of(2));
        Self { n, box_len }
    }

    pub fn spacing(&self) -> f64 {
        self.box_len / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn coordinate(&self, a: usize) -> f64 {
        (a as f64 - (self.n / 2) as f64) * self.spacing()
    }

    /// Node for flat index `(a * n + b) * n + c`.
    pub fn node(&self, flat: usize) -> Vec3 {
        let n = self.n;
        [
            self.coordinate(flat / (n * n)),
            self.coordinate((flat / n) % n),
            self.coordinate(flat % n),
        ]
    }
}

/// Real values on a [`QuadratureLattice`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub lattice: QuadratureLattice,
    pub values: Vec<f64>,
}

/// Screened-Laplacian kernel `K = -exp(-zeta r) / (4 pi r)`, the Green's
/// function of `Laplacian - zeta^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenedKernel {
    pub zeta2: f64,
    pub zeta: f64,
    /// Gradients are evaluated at `max(|x|, r_reg)`.
    pub r_reg: f64,
}

impl ScreenedKernel {
    /// `zeta^2 = beta / d_m + 1 / (d_m dt)`.
    pub fn new(d_m: f64, beta: f64, dt: f64) -> Result<Self> {
        if !(d_m > 0.0) || !(dt > 0.0) || !(beta >= 0.0) {
            return Err(crate::error::invalid(
                "kernel",
                format!("needs d_m > 0, dt > 0, beta >= 0 (got {d_m}, {dt}, {beta})"),
            ));
        }
        Ok(Self::from_zeta2(beta / d_m + 1.0 / (d_m * dt)))
    }

    /// Unchecked constructor; `zeta2 = 0` gives the Laplace kernel.
    pub fn from_zeta2(zeta2: f64) -> Self {
        Self {
            zeta2,
            zeta: zeta2.sqrt(),
            r_reg: 0.0,
        }
    }

    pub fn with_regularization(mut self, r_reg: f64) -> Self {
        self.r_reg = r_reg;
        self
    }

    /// Regularization radius `L / (2H)` used by the particle solver.
    pub fn lattice_regularization(modes: usize, box_len: f64) -> f64 {
        box_len / (2.0 * modes as f64)
    }

    fn check(&self, r: f64) -> Result<()> {
        if r == 0.0 || r < self.r_reg {
            return Err(Error::SingularInput {
                radius: r,
                r_reg: self.r_reg,
            });
        }
        Ok(())
    }

    pub fn kernel_real(&self, x: Vec3) -> Result<f64> {
        let r = norm(x);
        self.check(r)?;
        Ok(-(-self.zeta * r).exp() / (4.0 * PI * r))
    }

    /// `exp(-zeta r) (1 + zeta r) x / (4 pi r^3)`.
    pub fn kernel_gradient_real(&self, x: Vec3) -> Result<Vec3> {
        let r = norm(x);
        self.check(r)?;
        Ok(self.gradient_unchecked(x, r))
    }

    /// Gradient capped at the regularization radius; zero displacement gives zero.
    #[inline]
    pub fn kernel_gradient_regularized(&self, x: Vec3) -> Vec3 {
        let r = norm(x);
        if r == 0.0 {
            return [0.0; 3];
        }
        if r >= self.r_reg {
            return self.gradient_unchecked(x, r);
        }
        // value at |x| = r_reg along x
        let re = self.r_reg;
        let mag = (-self.zeta * re).exp() * (1.0 + self.zeta * re) / (4.0 * PI * re * re);
        [mag * x[0] / r, mag * x[1] / r, mag * x[2] / r]
    }

    #[inline]
    fn gradient_unchecked(&self, x: Vec3, r: f64) -> Vec3 {
        let s = (-self.zeta * r).exp() * (1.0 + self.zeta * r) / (4.0 * PI * r * r * r);
        [s * x[0], s * x[1], s * x[2]]
    }
}

#[inline]
pub(crate) fn norm(x: Vec3) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Fourier-space solve of `(zeta^2 - Laplacian) u = rhs`:
/// `c_k -> c_k / (|k|^2 + zeta^2)`.
pub fn screened_inverse(rhs: &SpectralField, kernel: &ScreenedKernel) -> SpectralField {
    let mut out = rhs.clone();
    let u = (2.0 * PI / rhs.box_len).powi(2);
    for (j, m, l) in rhs.mode_indices() {
        let k2 = u * (j * j + m * m + l * l) as f64;
        let i = out.index(j, m, l);
        out.coeffs[i] /= k2 + kernel.zeta2;
    }
    out
}

const PARTICLE_CHUNK: usize = 256;

/// Exact coefficients of the empirical measure
/// `c_k = M0 / (P L^3) sum_p exp(-i k.X_p)`, by direct summation.
pub fn particle_fourier_coefficients(
    ens: &ParticleEnsemble,
    modes: usize,
    box_len: f64,
) -> SpectralField {
    let mut out = SpectralField::zeros(modes, box_len);
    let h = out.half();
    let s = out.side();
    let hs = h as usize + 1;
    // Half spectrum l >= 0, accumulated per fixed-size chunk and reduced in
    // chunk order so the result does not depend on the thread count.
    let partials: Vec<Vec<Complex64>> = ens
        .positions
        .par_chunks(PARTICLE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![Complex64::default(); s * s * hs];
            for x in chunk {
                let ex = axis_phases(h, x[0], box_len, -1.0);
                let ey = axis_phases(h, x[1], box_len, -1.0);
                let ez = &axis_phases(h, x[2], box_len, -1.0)[h as usize..];
                for a in 0..s {
                    for b in 0..s {
                        let exy = ex[a] * ey[b];
                        let row = &mut acc[(a * s + b) * hs..(a * s + b + 1) * hs];
                        for (r, z) in row.iter_mut().zip(ez) {
                            *r += exy * z;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Complex64::default(); s * s * hs];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let scale = ens.mass / (ens.len() as f64 * box_len.powi(3));
    for a in 0..s {
        for b in 0..s {
            for c in 0..hs {
                let v = total[(a * s + b) * hs + c] * scale;
                let (j, m, l) = (a as i64 - h, b as i64 - h, c as i64);
                out.set(j, m, l, v);
                if l > 0 {
                    out.set(-j, -m, -l, v.conj());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};
    use rand::Rng;

    fn random_hermitian(modes: usize, box_len: f64, seed: u64) -> SpectralField {
        let mut rng = rng::stream(seed, Purpose::Synthetic, 0, 0);
        let mut f = SpectralField::zeros(modes, box_len);
        for (j, m, l) in f.mode_indices().collect::<Vec<_>>() {
            let decay = (-0.2 * ((j * j + m * m + l * l) as f64)).exp();
            f.set(j, m, l, Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * decay);
        }
        f.enforce_hermitian();
        f
    }

    fn naive_value(f: &SpectralField, x: Vec3) -> f64 {
        let mut v = Complex64::default();
        for (j, m, l) in f.mode_indices() {
            let k = f.wavevector(j, m, l);
            v += f.get(j, m, l) * Complex64::from_polar(1.0, k[0] * x[0] + k[1] * x[1] + k[2] * x[2]);
        }
        v.re
    }

    #[test]
    fn constant_and_cosine_modes() {
        let f = SpectralField::constant(4, 2.0, 5.0);
        assert!((f.evaluate_at([0.3, -0.7, 0.1]) - 5.0).abs() < 1e-14);
        assert_eq!(f.gradient_at([0.3, -0.7, 0.1]), [0.0; 3]);

        let mut c = SpectralField::zeros(4, 2.0);
        c.set(1, 0, 0, Complex64::new(1.0, 0.0));
        c.set(-1, 0, 0, Complex64::new(1.0, 0.0));
        for x in [[0.1, 0.2, 0.3], [-0.77, 0.0, 0.9]] {
            let w = 2.0 * PI * x[0] / 2.0;
            assert!((c.evaluate_at(x) - 2.0 * w.cos()).abs() < 1e-14);
            let g = c.gradient_at(x);
            assert!((g[0] + (4.0 * PI / 2.0) * w.sin()).abs() < 1e-13);
            assert!(g[1].abs() < 1e-14 && g[2].abs() < 1e-14);
        }
    }

    #[test]
    fn evaluation_matches_naive_sum() {
        let f = random_hermitian(8, 1.5, 3);
        for x in [[0.11, -0.4, 0.6], [0.7, 0.7, -0.1], [0.0, 0.0, 0.0]] {
            assert!((f.evaluate_at(x) - naive_value(&f, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = random_hermitian(8, 1.0, 4);
        let x = [0.13, -0.27, 0.31];
        let g = f.gradient_at(x);
        let h = 1e-5;
        let gn = norm(g);
        for d in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let fd = (f.evaluate_at(xp) - f.evaluate_at(xm)) / (2.0 * h);
            assert!((fd - g[d]).abs() <= 1e-6 * gn, "{d}: {fd} vs {}", g[d]);
        }
    }

    #[test]
    fn screened_inverse_zero_mode() {
        let k = ScreenedKernel::new(0.001, 0.0, 0.01).unwrap();
        assert!((k.zeta2 - 1e5).abs() < 1e-9);
        let f = SpectralField::constant(4, 1.0, 3.0);
        let u = screened_inverse(&f, &k);
        assert!((u.zero_mode().re - 3.0 / 1e5).abs() < 1e-18);
    }

    #[test]
    fn screened_inverse_shrinks_every_mode() {
        let f = random_hermitian(6, 1.0, 9);
        let k = ScreenedKernel::from_zeta2(3.0);
        let u = screened_inverse(&f, &k);
        for (a, b) in f.coeffs().iter().zip(u.coeffs()) {
            assert!(b.norm() <= a.norm() / 3.0 + 1e-15);
        }
    }

    #[test]
    fn kernel_limits_and_monotonicity() {
        let laplace = ScreenedKernel::from_zeta2(0.0);
        let x = [0.3, -0.1, 0.2];
        let r = norm(x);
        assert!((laplace.kernel_real(x).unwrap() + 1.0 / (4.0 * PI * r)).abs() < 1e-14);
        let k = ScreenedKernel::from_zeta2(25.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 1..50 {
            let v = k.kernel_real([0.02 * i as f64, 0.0, 0.0]).unwrap();
            assert!(v < 0.0 && v > prev);
            prev = v;
        }
        assert!(matches!(k.kernel_real([0.0; 3]), Err(Error::SingularInput { .. })));
        let reg = k.with_regularization(0.1);
        assert!(reg.kernel_gradient_real([0.05, 0.0, 0.0]).is_err());
    }

    #[test]
    fn kernel_is_annihilated_by_screened_operator() {
        let k = ScreenedKernel::from_zeta2(16.0);
        let h = 1e-3;
        for x in [[0.2, 0.1, -0.15], [0.5, 0.0, 0.0], [-0.1, 0.3, 0.3]] {
            let v = k.kernel_real(x).unwrap();
            let mut lap = -6.0 * v;
            for d in 0..3 {
                for s in [-1.0, 1.0] {
                    let mut y = x;
                    y[d] += s * h;
                    lap += k.kernel_real(y).unwrap();
                }
            }
            lap /= h * h;
            let resid = lap - k.zeta2 * v;
            assert!(resid.abs() < 1e-4 * (k.zeta2 * v).abs(), "{resid}");
        }
    }

    #[test]
    fn kernel_gradient_is_odd_outward_and_exact() {
        let k = ScreenedKernel::from_zeta2(9.0);
        let x = [0.06, -0.05, 0.055];
        let g = k.kernel_gradient_real(x).unwrap();
        let gm = k.kernel_gradient_real([-x[0], -x[1], -x[2]]).unwrap();
        for d in 0..3 {
            assert_eq!(g[d], -gm[d]);
        }
        assert!(g[0] * x[0] + g[1] * x[1] + g[2] * x[2] > 0.0);
        let h = 1e-6;
        for d in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let fd = (k.kernel_real(xp).unwrap() - k.kernel_real(xm).unwrap()) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-6 * norm(g));
        }
    }

    #[test]
    fn particle_coefficients_special_cases() {
        let ens = ParticleEnsemble {
            positions: vec![[0.0; 3]; 7],
            mass: 2.0,
        };
        let c = particle_fourier_coefficients(&ens, 4, 1.0);
        for v in c.coeffs() {
            assert!((v - Complex64::new(2.0, 0.0)).norm() < 1e-14);
        }
        let ens = ParticleEnsemble {
            positions: vec![[0.1, 0.2, -0.3], [0.4, -0.1, 0.0]],
            mass: 3.0,
        };
        let c = particle_fourier_coefficients(&ens, 4, 2.0);
        assert!((c.zero_mode() - Complex64::new(3.0 / 8.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn particle_coefficients_match_scalar_oracle() {
        let ens = ParticleEnsemble {
            positions: vec![[0.12, -0.33, 0.41], [-0.05, 0.22, 0.09], [0.3, 0.3, -0.44]],
            mass: 0.7,
        };
        let (modes, box_len) = (4, 1.0);
        let c = particle_fourier_coefficients(&ens, modes, box_len);
        for (j, m, l) in c.mode_indices() {
            let k = c.wavevector(j, m, l);
            let mut acc = Complex64::default();
            for x in &ens.positions {
                acc += Complex64::from_polar(1.0, -(k[0] * x[0] + k[1] * x[1] + k[2] * x[2]));
            }
            acc *= ens.mass / (3.0 * box_len.powi(3));
            assert!((acc - c.get(j, m, l)).norm() < 1e-13);
        }
    }

    #[test]
    fn shift_rules() {
        let f = random_hermitian(6, 1.0, 5);
        assert_eq!(f.shifted([0.0; 3]), f);
        let full = f.shifted([1.0, 0.0, 0.0]);
        for (a, b) in f.coeffs().iter().zip(full.coeffs()) {
            assert!((a - b).norm() < 1e-13);
        }
        let shift = [0.13, -0.41, 0.07];
        let s = f.shifted(shift);
        for x in [[0.2, 0.3, 0.4], [-0.45, 0.1, 0.0]] {
            let y = [x[0] - shift[0], x[1] - shift[1], x[2] - shift[2]];
            assert!((s.evaluate_at(x) - f.evaluate_at(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_transform_special_cases() {
        let f = SpectralField::constant(6, 1.0, 2.5);
        let lat = f.inverse_transform_to_lattice();
        assert!(lat.values.iter().all(|v| (v - 2.5).abs() < 1e-14));
        let mut c = SpectralField::zeros(6, 1.0);
        c.set(0, 2, 0, Complex64::new(0.5, 0.0));
        c.set(0, -2, 0, Complex64::new(0.5, 0.0));
        let lat = c.inverse_transform_to_lattice();
        for (i, v) in lat.values.iter().enumerate() {
            let x = lat.lattice.node(i);
            assert!((v - (2.0 * PI * 2.0 * x[1]).cos()).abs() < 1e-13);
        }
    }

    #[test]
    fn lattice_values_match_pointwise_evaluation() {
        let f = random_hermitian(8, 1.3, 6);
        let lat = f.inverse_transform_to_lattice();
        for (i, v) in lat.values.iter().enumerate() {
            assert!((v - f.evaluate_at(lat.lattice.node(i))).abs() < 1e-12);
        }
        let fine = f.sample_on_lattice(20);
        let q = QuadratureLattice::new(20, 1.3);
        for i in (0..q.len()).step_by(37) {
            assert!((fine[i] - f.evaluate_at(q.node(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let f = random_hermitian(4, 1.0, 8);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let g = SpectralField::read_csv(&buf[..], 1.0).unwrap();
        assert_eq!(f, g);
    }
}
