//! Radial binning, error metrics, rate fits and the closed-form integral
//! identities used to compare the three solvers.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdm::GridField;
use crate::params::{compute_total_mass, dist2, InitialCondition, ParticleEnsemble, SimulationParams, Vec3};
use crate::quad;
use crate::radial::RadialGrid;
use crate::spectral::{QuadratureLattice, SpectralField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Sipf,
    Fdm,
    Radial,
}

/// Per-bin values on `[edges[i], edges[i+1])`. Bins with no samples have
/// `counts[i] == 0`; their value is zero and they are skipped by the error sums.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub edges: Vec<f64>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub source: Source,
}

/// `n` uniform bin edges on `[0, r_max]`.
pub fn uniform_edges(bin_width: f64, r_max: f64) -> Result<Vec<f64>> {
    if !(bin_width > 0.0) || !(r_max >= bin_width) {
        return Err(crate::error::invalid(
            "bin_width",
            format!("need 0 < bin_width <= r_max, got {bin_width}, {r_max}"),
        ));
    }
    let n = (r_max / bin_width).round().max(1.0) as usize;
    Ok((0..=n).map(|i| i as f64 * bin_width).collect())
}

impl RadialProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn is_filled(&self, i: usize) -> bool {
        self.counts[i] > 0
    }

    /// Midpoint of the largest filled bin.
    pub fn peak_radius(&self) -> f64 {
        let mid = self.midpoints();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in (0..self.len()).filter(|&i| self.is_filled(i)) {
            if self.values[i] > best.0 {
                best = (self.values[i], mid[i]);
            }
        }
        best.1
    }

    pub fn min_filled_value(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.is_filled(i))
            .map(|i| self.values[i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Linear interpolation of bin midpoints onto `edges`.
    pub fn resample(&self, edges: &[f64]) -> RadialProfile {
        let mid = self.midpoints();
        let filled: Vec<usize> = (0..self.len()).filter(|&i| self.is_filled(i)).collect();
        let xs: Vec<f64> = filled.iter().map(|&i| mid[i]).collect();
        let ys: Vec<f64> = filled.iter().map(|&i| self.values[i]).collect();
        let values = edges
            .windows(2)
            .map(|w| interp(&xs, &ys, 0.5 * (w[0] + w[1])))
            .collect::<Vec<_>>();
        RadialProfile {
            counts: vec![1; values.len()],
            edges: edges.to_vec(),
            values,
            source: self.source,
        }
    }

    /// CSV with columns `r_lo,r_hi,value,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "r_lo,r_hi,value,count")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{},{}", self.edges[i], self.edges[i + 1], self.values[i], self.counts[i])?;
        }
        Ok(())
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] * (1.0 - t) + ys[k] * t
}

fn bin_index(edges: &[f64], r: f64) -> Option<usize> {
    let w = edges[1] - edges[0];
    let i = (r / w).floor();
    if r < edges[0] || i < 0.0 || i as usize >= edges.len() - 1 {
        return None;
    }
    Some(i as usize)
}

/// Mean of the sample values whose distance to `center` falls in each bin.
pub fn bin_field_radially(
    points: impl IntoIterator<Item = Vec3>,
    values: &[f64],
    center: Vec3,
    bin_width: f64,
    r_max: f64,
    source: Source,
) -> Result<RadialProfile> {
    let edges = uniform_edges(bin_width, r_max)?;
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (x, v) in points.into_iter().zip(values) {
        if let Some(i) = bin_index(&edges, dist2(x, center).sqrt()) {
            sums[i] += v;
            counts[i] += 1;
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(RadialProfile {
        edges,
        values,
        counts,
        source,
    })
}

/// Bins a spectral field through its values on an `n^3` evaluation lattice.
pub fn bin_spectral_field(
    field: &SpectralField,
    n: usize,
    center: Vec3,
    bin_width: f64,
    r_max: f64,
) -> Result<RadialProfile> {
    let lat = QuadratureLattice::new(n, field.box_len());
    let values = field.sample_on_lattice(n);
    bin_field_radially((0..lat.len()).map(|i| lat.node(i)), &values, center, bin_width, r_max, Source::Sipf)
}

/// Bins one of the grid arrays of a finite-difference snapshot.
pub fn bin_grid_field(
    grid: &GridField,
    values: &[f64],
    center: Vec3,
    bin_width: f64,
    r_max: f64,
) -> Result<RadialProfile> {
    bin_field_radially((0..values.len()).map(|i| grid.node(i)), values, center, bin_width, r_max, Source::Fdm)
}

/// Bins a radial reference exactly as a 3D field sampled at `points` would
/// be binned, by linear interpolation of the reference at each sample radius.
pub fn bin_reference_like(
    reference: &RadialGrid,
    u: &[f64],
    points: impl IntoIterator<Item = Vec3>,
    center: Vec3,
    bin_width: f64,
    r_max: f64,
) -> Result<RadialProfile> {
    let pts: Vec<Vec3> = points.into_iter().collect();
    let values: Vec<f64> = pts
        .iter()
        .map(|&x| RadialGrid::interpolate(u, reference.dr, dist2(x, center).sqrt()))
        .collect();
    let mut p = bin_field_radially(pts, &values, center, bin_width, r_max, Source::Radial)?;
    p.source = Source::Radial;
    Ok(p)
}

/// Shell averages `int r^2 u / int r^2` of a radial solution over each bin.
pub fn bin_radial_grid(reference: &RadialGrid, u: &[f64], bin_width: f64, r_max: f64) -> Result<RadialProfile> {
    let edges = uniform_edges(bin_width, r_max)?;
    let nb = edges.len() - 1;
    let mut num = vec![0.0; nb];
    let mut den = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (i, v) in u.iter().enumerate() {
        let r = reference.r(i);
        if let Some(b) = bin_index(&edges, r) {
            num[b] += r * r * v;
            den[b] += r * r;
            counts[b] += 1;
        }
    }
    let values = num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect();
    Ok(RadialProfile {
        edges,
        values,
        counts,
        source: Source::Radial,
    })
}

/// Density estimate `(M0/P) count_i / V_i` with `V_i` the exact shell volume.
/// Every bin is a valid estimate (an empty shell means zero density).
pub fn bin_particles_radially(
    ens: &ParticleEnsemble,
    center: Vec3,
    bin_width: f64,
    r_max: f64,
) -> Result<RadialProfile> {
    let edges = uniform_edges(bin_width, r_max)?;
    let nb = edges.len() - 1;
    let mut counts = vec![0usize; nb];
    for &x in &ens.positions {
        if let Some(i) = bin_index(&edges, dist2(x, center).sqrt()) {
            counts[i] += 1;
        }
    }
    let w = ens.particle_mass();
    let values = (0..nb)
        .map(|i| {
            let vol = 4.0 / 3.0 * PI * (edges[i + 1].powi(3) - edges[i].powi(3));
            w * counts[i] as f64 / vol
        })
        .collect();
    Ok(RadialProfile {
        edges,
        values,
        counts: vec![1; nb],
        source: Source::Sipf,
    })
}

/// Particle counts per bin, without conversion to density.
pub fn particle_counts(ens: &ParticleEnsemble, center: Vec3, edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; edges.len() - 1];
    for &x in &ens.positions {
        if let Some(i) = bin_index(edges, dist2(x, center).sqrt()) {
            counts[i] += 1;
        }
    }
    counts
}

/// `sqrt(sum (M_i - R_i)^2) / sqrt(sum R_i^2)` over bins filled in both.
/// A reference on different edges is first resampled onto `num`'s bins.
pub fn relative_l2_error(num: &RadialProfile, reference: &RadialProfile) -> Result<f64> {
    let resampled;
    let r = if num.edges == reference.edges {
        reference
    } else {
        resampled = reference.resample(&num.edges);
        &resampled
    };
    let (mut e2, mut r2) = (0.0, 0.0);
    for i in 0..num.len() {
        if num.is_filled(i) && r.is_filled(i) {
            e2 += (num.values[i] - r.values[i]).powi(2);
            r2 += r.values[i].powi(2);
        }
    }
    if r2 == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((e2 / r2).sqrt())
}

/// `|log(e_prev / e_curr) / log(h_prev / h_curr)|`.
pub fn convergence_rate(err_prev: f64, err_curr: f64, h_prev: f64, h_curr: f64) -> f64 {
    ((err_prev / err_curr).ln() / (h_prev / h_curr).ln()).abs()
}

/// `|log(t_curr / t_prev) / log(h_prev / h_curr)|`.
pub fn runtime_scaling_ratio(t_prev: f64, t_curr: f64, h_prev: f64, h_curr: f64) -> f64 {
    ((t_curr / t_prev).ln() / (h_prev / h_curr).ln()).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub label: String,
    /// The swept setting (grid points, dt, P or H).
    pub control: f64,
    /// Step size used for the rate/ratio columns (grid spacing, dt, ...).
    pub spacing: f64,
    pub runtime: f64,
    pub error: f64,
    pub ratio: Option<f64>,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    /// Appends a row, filling rate and ratio from the previous one.
    pub fn push(&mut self, label: impl Into<String>, control: f64, spacing: f64, runtime: f64, error: f64) {
        let (ratio, rate) = match self.rows.last() {
            Some(p) => (
                Some(runtime_scaling_ratio(p.runtime, runtime, p.spacing, spacing)),
                Some(convergence_rate(p.error, error, p.spacing, spacing)),
            ),
            None => (None, None),
        };
        self.rows.push(ErrorRow {
            label: label.into(),
            control,
            spacing,
            runtime,
            error,
            ratio,
            rate,
        });
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    /// Full table, including the wall-clock columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "setting,control,runtime_s,ratio,rel_l2_error,rate")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.3},{},{:.6e},{}",
                r.label,
                r.control,
                r.runtime,
                opt(r.ratio),
                r.error,
                opt(r.rate)
            )?;
        }
        Ok(())
    }

    /// Table without the wall-clock columns; reproducible bit for bit.
    pub fn write_errors_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "setting,control,rel_l2_error,rate")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.label, r.control, r.error, opt(r.rate))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Closed-form `int m(x, t)`, from `d/dt int m = -beta int m + alpha M0`.
pub fn integral_m_reference(t: f64, params: &SimulationParams, ic: &InitialCondition) -> f64 {
    let m0 = compute_total_mass(ic, params.epsilon);
    let i0 = 0.5 * m0;
    let src = params.alpha * m0;
    if params.beta == 0.0 {
        i0 + src * t
    } else {
        let e = (-params.beta * t).exp();
        i0 * e + src / params.beta * (1.0 - e)
    }
}

/// Closed-form `int ln f(x, t)`, from `d/dt int ln f = -eta int m`.
/// Blobs must not overlap so `ln f0` is additive over them.
pub fn integral_lnf_reference(t: f64, params: &SimulationParams, ic: &InitialCondition) -> Result<f64> {
    let rt = ic.truncation_radius;
    for (i, a) in ic.blobs.iter().enumerate() {
        for b in &ic.blobs[i + 1..] {
            if dist2(a.center, b.center) < 4.0 * rt * rt {
                return Err(Error::InvalidInitialCondition(
                    "ln f identity needs non-overlapping blobs".into(),
                ));
            }
        }
    }
    let eps = params.epsilon;
    let initial: f64 = ic
        .blobs
        .iter()
        .map(|b| {
            4.0 * PI
                * quad::integrate(|r| r * r * (1.0 - 0.5 * b.weight * (-r * r / eps).exp()).ln(), 0.0, rt, 1e-12)
        })
        .sum();
    let m0 = compute_total_mass(ic, eps);
    let (i0, src, beta) = (0.5 * m0, params.alpha * m0, params.beta);
    // int_0^t int m
    let cumulative = if beta == 0.0 {
        i0 * t + 0.5 * src * t * t
    } else {
        let g = (1.0 - (-beta * t).exp()) / beta;
        i0 * g + src / beta * (t - g)
    };
    Ok(initial - params.eta * cumulative)
}

/// A snapshot of one of the three solvers.
#[derive(Debug, Clone, Copy)]
pub enum Snapshot<'a> {
    /// MDE and ECM fields of a particle-field run.
    Sipf { m: &'a SpectralField, f: &'a SpectralField },
    Fdm(&'a GridField),
    Radial(&'a RadialGrid),
}

/// `int m` by the method native to each solver: `c_000 L^3`, the cell sum
/// times `dx^dim`, or the shell sum `sum 4 pi r_i^2 m_i dr`.
pub fn integral_m_numerical(s: Snapshot<'_>) -> f64 {
    match s {
        Snapshot::Sipf { m, .. } => m.zero_mode().re * m.box_len().powi(3),
        Snapshot::Fdm(g) => g.m.iter().sum::<f64>() * g.cell_volume(),
        Snapshot::Radial(g) => g.shell_sum(&g.m),
    }
}

/// `int ln f`; for the particle-field solver `f` is sampled on the `H^3`
/// quadrature lattice. Nonpositive values are reported, not clamped.
pub fn integral_lnf_numerical(s: Snapshot<'_>) -> Result<f64> {
    fn log_sum(v: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (node, &x) in v.iter().enumerate() {
            if !(x > 0.0) {
                return Err(Error::NonPositiveField { value: x, node });
            }
            acc += x.ln();
        }
        Ok(acc)
    }
    match s {
        Snapshot::Sipf { f, .. } => {
            let lat = f.inverse_transform_to_lattice();
            Ok(log_sum(&lat.values)? * lat.lattice.cell_volume())
        }
        Snapshot::Fdm(g) => Ok(log_sum(&g.f)? * g.cell_volume()),
        Snapshot::Radial(g) => {
            let logs: Vec<f64> = g.f.iter().map(|v| v.ln()).collect();
            if let Some((node, &value)) = g.f.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::NonPositiveField { value, node });
            }
            Ok(g.shell_sum(&logs))
        }
    }
}

/// `|m_n - m_r| / |m_r|`.
pub fn error_m(m_numerical: f64, m_reference: f64) -> Result<f64> {
    if m_reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(((m_numerical - m_reference) / m_reference).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// `log err` against `log x`.
    LogLog,
    /// `log err` against `x`.
    SemiLog,
}

/// Least-squares slope of `log err` against `log x` (or `x`).
pub fn fit_loglog_slope(points: &[(f64, f64)], mode: FitMode) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.1 > 0.0) || (mode == FitMode::LogLog && !(p.0 > 0.0))) {
        return Err(Error::DegenerateFit(format!("non-positive point {p:?}")));
    }
    let xs: Vec<f64> = points
        .iter()
        .map(|p| if mode == FitMode::LogLog { p.0.ln() } else { p.0 })
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return Err(Error::DegenerateFit("all abscissae equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// `(x, err)` rows plus a one-line fit summary.
pub fn write_fit_csv<W: Write>(mut w: W, points: &[(f64, f64)], mode: FitMode, slope: f64) -> std::io::Result<()> {
    writeln!(w, "x,err")?;
    for (x, e) in points {
        writeln!(w, "{x},{e}")?;
    }
    writeln!(w, "# fit mode={mode:?} slope={slope}")
}
