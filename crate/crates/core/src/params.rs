//! Model constants, initial data and initial sampling.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad;
use crate::rng::{self, Purpose};
use crate::spectral::SpectralField;

pub type Vec3 = [f64; 3];

/// Model constants and discretization knobs shared by all three solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationParams {
    /// Tumor cell motility.
    pub d_n: f64,
    /// MDE diffusion.
    pub d_m: f64,
    /// Haptotactic coefficient.
    pub gamma: f64,
    /// ECM degradation rate.
    pub eta: f64,
    /// MDE production rate.
    pub alpha: f64,
    /// MDE decay rate.
    pub beta: f64,
    /// Width of the initial Gaussian, `exp(-r^2 / epsilon)`.
    pub epsilon: f64,
    /// Side of the periodic cube `[-L/2, L/2)^3`.
    #[serde(alias = "L")]
    pub box_len: f64,
    pub dt: f64,
    #[serde(alias = "T")]
    pub t_final: f64,
    /// Particle count `P`.
    #[serde(alias = "P")]
    pub particles: usize,
    /// Fourier modes per dimension `H`; the index set is `|j|, |m|, |l| <= H/2`.
    #[serde(alias = "H")]
    pub modes: usize,
    pub seed: u64,
    /// Spatial dimension; only the finite-difference solver accepts 2.
    pub dim: usize,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            d_n: 0.001,
            d_m: 0.001,
            gamma: 0.005,
            eta: 10.0,
            alpha: 0.1,
            beta: 0.0,
            epsilon: 0.0025,
            box_len: 1.0,
            dt: 0.01,
            t_final: 4.0,
            particles: 10_000,
            modes: 24,
            seed: 20_240_601,
            dim: 3,
        }
    }
}

impl SimulationParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("d_n", self.d_n),
            // zero is fine for the grid solvers; the particle-field kernel
            // rejects it separately
            ("d_m", self.d_m),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("epsilon", self.epsilon),
            ("box_len", self.box_len),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.particles < 1 {
            return Err(invalid("particles", "P must be at least 1"));
        }
        if self.modes < 2 || !self.modes.is_multiple_of(2) {
            return Err(invalid("modes", format!("H must be even and >= 2, got {}", self.modes)));
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(invalid("t_final", "T must be finite and >= 0"));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(invalid("dim", format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        Ok(())
    }

    /// Number of time steps `T / dt`, rejecting a final time that is not a
    /// whole number of steps.
    pub fn num_steps(&self) -> Result<usize> {
        steps_for(self.t_final, self.dt)
    }
}

pub(crate) fn steps_for(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if !(t >= 0.0) || (k * dt - t).abs() > 1e-9 * t.abs().max(dt) {
        return Err(Error::SnapshotTime { time: t, dt });
    }
    Ok(k as usize)
}

/// One truncated Gaussian blob of tumor cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec3,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_truncation() -> f64 {
    0.1
}

/// Initial data: `rho0 = sum_b w_b exp(-|x - c_b|^2 / eps)` cut off at the
/// truncation radius, `f0 = 1 - rho0 / 2`, `m0 = rho0 / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCondition {
    pub blobs: Vec<Blob>,
    #[serde(default = "default_truncation")]
    pub truncation_radius: f64,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self::single_centered()
    }
}

impl InitialCondition {
    pub fn single_centered() -> Self {
        Self {
            blobs: vec![Blob {
                center: [0.0; 3],
                weight: 1.0,
            }],
            truncation_radius: 0.1,
        }
    }

    /// Two unit blobs at `+offset` and `-offset`.
    pub fn two_clusters(offset: Vec3) -> Self {
        Self {
            blobs: vec![
                Blob {
                    center: offset,
                    weight: 1.0,
                },
                Blob {
                    center: [-offset[0], -offset[1], -offset[2]],
                    weight: 1.0,
                },
            ],
            truncation_radius: 0.1,
        }
    }

    /// Checks that every blob sits strictly inside the cube of side `box_len`
    /// centered at the origin.
    pub fn validate(&self, box_len: f64) -> Result<()> {
        if !(self.truncation_radius > 0.0) {
            return Err(Error::InvalidInitialCondition(
                "truncation radius must be positive".into(),
            ));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if !(b.weight >= 0.0) || !b.weight.is_finite() {
                return Err(Error::InvalidInitialCondition(format!(
                    "blob {i} has weight {}",
                    b.weight
                )));
            }
            for c in b.center {
                if c.abs() + self.truncation_radius >= 0.5 * box_len {
                    return Err(Error::InvalidInitialCondition(format!(
                        "blob {i} at {:?} with radius {} leaves the box of side {box_len}",
                        b.center, self.truncation_radius
                    )));
                }
            }
        }
        Ok(())
    }

    fn profile(&self, epsilon: f64, r2: f64) -> f64 {
        if r2 <= self.truncation_radius * self.truncation_radius {
            (-r2 / epsilon).exp()
        } else {
            0.0
        }
    }

    pub fn rho0(&self, epsilon: f64, x: Vec3) -> f64 {
        self.blobs
            .iter()
            .map(|b| b.weight * self.profile(epsilon, dist2(x, b.center)))
            .sum()
    }

    pub fn f0(&self, epsilon: f64, x: Vec3) -> f64 {
        1.0 - 0.5 * self.rho0(epsilon, x)
    }

    pub fn m0(&self, epsilon: f64, x: Vec3) -> f64 {
        0.5 * self.rho0(epsilon, x)
    }

    /// `rho0` on the plane `z = 0`, used by the two-dimensional baseline.
    pub fn rho0_2d(&self, epsilon: f64, x: [f64; 2]) -> f64 {
        self.rho0(epsilon, [x[0], x[1], 0.0])
    }
}

pub(crate) fn dist2(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `4 pi int_0^rt r^2 exp(-r^2/eps) dr` for a unit blob.
pub fn unit_blob_mass(epsilon: f64, truncation_radius: f64) -> f64 {
    4.0 * PI * quad::integrate(|r| r * r * (-r * r / epsilon).exp(), 0.0, truncation_radius, 1e-12)
}

/// Total tumor mass `M0 = int rho0`.
pub fn compute_total_mass(ic: &InitialCondition, epsilon: f64) -> f64 {
    let unit = unit_blob_mass(epsilon, ic.truncation_radius);
    ic.blobs.iter().map(|b| b.weight * unit).sum()
}

/// Positions of `P` particles, each carrying mass `M0 / P`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<Vec3>,
    pub mass: f64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle_mass(&self) -> f64 {
        self.mass / self.positions.len() as f64
    }
}

const CDF_NODES: usize = 10_000;

/// Tabulated CDF of `r^2 exp(-r^2/eps)` on `[0, rt]`, inverted by linear
/// interpolation.
struct RadialSampler {
    radii: Vec<f64>,
    cdf: Vec<f64>,
}

impl RadialSampler {
    fn new(epsilon: f64, rt: f64) -> Self {
        let n = CDF_NODES;
        let radii: Vec<f64> = (0..=n).map(|i| rt * i as f64 / n as f64).collect();
        let density = |r: f64| r * r * (-r * r / epsilon).exp();
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in radii.windows(2) {
            // Simpson on each panel; the integrand is smooth.
            let (a, b) = (w[0], w[1]);
            acc += (b - a) / 6.0 * (density(a) + 4.0 * density(0.5 * (a + b)) + density(b));
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Self { radii, cdf }
    }

    fn invert(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.radii[i - 1] + t * (self.radii[i] - self.radii[i - 1])
    }
}

/// Draws `P` i.i.d. samples from `rho0 / M0`. Particle `p` uses its own keyed
/// stream, so the ensemble is a pure function of `(ic, P, seed)`.
pub fn sample_initial_particles(
    ic: &InitialCondition,
    params: &SimulationParams,
) -> Result<ParticleEnsemble> {
    ic.validate(params.box_len)?;
    if params.particles == 0 {
        return Err(invalid("particles", "P must be at least 1"));
    }
    let total_weight: f64 = ic.blobs.iter().map(|b| b.weight).sum();
    if !(total_weight > 0.0) {
        return Err(Error::InvalidInitialCondition("no positive-weight blob".into()));
    }
    let sampler = RadialSampler::new(params.epsilon, ic.truncation_radius);
    let mut cumulative = Vec::with_capacity(ic.blobs.len());
    let mut acc = 0.0;
    for b in &ic.blobs {
        acc += b.weight / total_weight;
        cumulative.push(acc);
    }
    let positions = (0..params.particles)
        .map(|p| {
            let mut rng = rng::stream(params.seed, Purpose::InitialSample, 0, p as u64);
            let pick: f64 = rng.random();
            let blob = cumulative
                .iter()
                .position(|&c| pick < c)
                .unwrap_or(ic.blobs.len() - 1);
            let r = sampler.invert(rng.random());
            let cos_t = 2.0 * rng.random::<f64>() - 1.0;
            let phi = 2.0 * PI * rng.random::<f64>();
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let c = ic.blobs[blob].center;
            [
                c[0] + r * sin_t * phi.cos(),
                c[1] + r * sin_t * phi.sin(),
                c[2] + r * cos_t,
            ]
        })
        .collect();
    Ok(ParticleEnsemble {
        positions,
        mass: compute_total_mass(ic, params.epsilon),
    })
}

/// Which initial field to project.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Mde,
    Ecm,
}

/// How the initial Fourier coefficients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Exact coefficients of the truncated radial profile from a 1D
    /// quadrature of `r^2 g(r) sin(kr)/(kr)`.
    #[default]
    Radial,
    /// Forward DFT of the closed form sampled on `max(2H, 64)` points per axis.
    GridDft,
}

/// Fourier coefficients `c_k = L^-3 int g exp(-i k.x)` of `m0` or `f0`,
/// truncated to `|j|, |m|, |l| <= H/2`.
pub fn initial_field_coefficients(
    ic: &InitialCondition,
    epsilon: f64,
    modes: usize,
    box_len: f64,
    which: FieldKind,
    projection: Projection,
) -> SpectralField {
    let (scale, constant) = match which {
        FieldKind::Mde => (0.5, 0.0),
        FieldKind::Ecm => (-0.5, 1.0),
    };
    match projection {
        Projection::Radial => radial_projection(ic, epsilon, modes, box_len, scale, constant),
        Projection::GridDft => {
            let n = (2 * modes).max(64);
            let h = box_len / n as f64;
            let half = (n / 2) as f64;
            let mut values = vec![0.0; n * n * n];
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let x = [
                            (a as f64 - half) * h,
                            (b as f64 - half) * h,
                            (c as f64 - half) * h,
                        ];
                        values[(a * n + b) * n + c] =
                            constant + scale * ic.rho0(epsilon, x);
                    }
                }
            }
            SpectralField::from_lattice(&values, n, modes, box_len)
        }
    }
}

fn radial_projection(
    ic: &InitialCondition,
    epsilon: f64,
    modes: usize,
    box_len: f64,
    scale: f64,
    constant: f64,
) -> SpectralField {
    let half = (modes / 2) as i64;
    let rt = ic.truncation_radius;
    let kunit = 2.0 * PI / box_len;
    let max_q = 3 * half * half;
    // The transform of a radial profile depends on |k|^2 = kunit^2 q only.
    let table: Vec<f64> = (0..=max_q)
        .map(|q| {
            let k = kunit * (q as f64).sqrt();
            let integrand = |r: f64| {
                let g = r * r * (-r * r / epsilon).exp();
                if k * r < 1e-8 {
                    g
                } else {
                    g * (k * r).sin() / (k * r)
                }
            };
            4.0 * PI * quad::integrate(integrand, 0.0, rt, 1e-12)
        })
        .collect();
    let vol = box_len.powi(3);
    let mut field = SpectralField::zeros(modes, box_len);
    for (j, m, l) in field.mode_indices() {
        let q = (j * j + m * m + l * l) as usize;
        let k = [kunit * j as f64, kunit * m as f64, kunit * l as f64];
        let mut c = rustfft::num_complex::Complex64::new(0.0, 0.0);
        for b in &ic.blobs {
            let phase = -(k[0] * b.center[0] + k[1] * b.center[1] + k[2] * b.center[2]);
            c += rustfft::num_complex::Complex64::from_polar(b.weight * table[q], phase);
        }
        let mut v = c * (scale / vol);
        if (j, m, l) == (0, 0, 0) {
            v.re += constant;
        }
        field.set(j, m, l, v);
    }
    field.enforce_hermitian();
    field
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson_oracle(eps: f64, rt: f64, n: usize) -> f64 {
        let h = rt / n as f64;
        let g = |r: f64| r * r * (-r * r / eps).exp();
        let mut s = g(0.0) + g(rt);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        4.0 * PI * s * h / 3.0
    }

    #[test]
    fn total_mass_matches_simpson_oracle() {
        let ic = InitialCondition::single_centered();
        let m0 = compute_total_mass(&ic, 0.0025);
        let oracle = simpson_oracle(0.0025, 0.1, 1_000_000);
        assert!((m0 - oracle).abs() < 1e-10 * oracle, "{m0} vs {oracle}");
        assert!((m0 - 6.64e-4).abs() < 1e-6);
    }

    #[test]
    fn total_mass_flat_limit_and_linearity() {
        let ic = InitialCondition::single_centered();
        let flat = compute_total_mass(&ic, 1e12);
        assert!((flat - 4.0 / 3.0 * PI * 1e-3).abs() < 1e-12);
        let two = InitialCondition::two_clusters([0.1, 0.1, 0.1]);
        let a = compute_total_mass(&ic, 0.0025);
        assert!((compute_total_mass(&two, 0.0025) - 2.0 * a).abs() < 1e-18);
        let mut heavy = ic.clone();
        heavy.blobs[0].weight = 3.5;
        assert!((compute_total_mass(&heavy, 0.0025) - 3.5 * a).abs() < 1e-17);
    }

    #[test]
    fn samples_stay_within_truncation() {
        let params = SimulationParams {
            particles: 20_000,
            ..Default::default()
        };
        let ens = sample_initial_particles(&InitialCondition::single_centered(), &params).unwrap();
        assert_eq!(ens.len(), 20_000);
        for x in &ens.positions {
            assert!(dist2(*x, [0.0; 3]).sqrt() <= 0.1 + 1e-15);
        }
    }

    #[test]
    fn sample_mean_radius_matches_quadrature() {
        let eps = 0.0025;
        let params = SimulationParams {
            particles: 100_000,
            ..Default::default()
        };
        let ens = sample_initial_particles(&InitialCondition::single_centered(), &params).unwrap();
        let radii: Vec<f64> = ens.positions.iter().map(|x| dist2(*x, [0.0; 3]).sqrt()).collect();
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let num = quad::integrate(|r| r.powi(3) * (-r * r / eps).exp(), 0.0, 0.1, 1e-12);
        let den = quad::integrate(|r| r.powi(2) * (-r * r / eps).exp(), 0.0, 0.1, 1e-12);
        let expected = num / den;
        let se = (var / n).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
    }

    #[test]
    fn two_blobs_split_evenly() {
        let params = SimulationParams {
            particles: 10_000,
            ..Default::default()
        };
        let ic = InitialCondition::two_clusters([0.1, 0.1, 0.1]);
        let ens = sample_initial_particles(&ic, &params).unwrap();
        let first = ens
            .positions
            .iter()
            .filter(|x| dist2(**x, [0.1; 3]) < dist2(**x, [-0.1; 3]))
            .count() as f64;
        let tol = 3.0 * (10_000f64 / 4.0).sqrt();
        assert!((first - 5000.0).abs() <= tol, "{first}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let params = SimulationParams {
            particles: 500,
            ..Default::default()
        };
        let ic = InitialCondition::single_centered();
        let a = sample_initial_particles(&ic, &params).unwrap();
        let b = sample_initial_particles(&ic, &params).unwrap();
        assert_eq!(a, b);
        let c = sample_initial_particles(&ic, &SimulationParams { seed: 1, ..params }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blob_outside_box_is_rejected() {
        let ic = InitialCondition {
            blobs: vec![Blob {
                center: [0.45, 0.0, 0.0],
                weight: 1.0,
            }],
            truncation_radius: 0.1,
        };
        assert!(sample_initial_particles(&ic, &SimulationParams::default()).is_err());
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(SimulationParams::default().validate().is_ok());
        for bad in [
            SimulationParams { particles: 0, ..Default::default() },
            SimulationParams { modes: 7, ..Default::default() },
            SimulationParams { d_m: -1.0, ..Default::default() },
            SimulationParams { dt: -1.0, ..Default::default() },
            SimulationParams { beta: -0.1, ..Default::default() },
            SimulationParams { dim: 4, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn constant_ecm_without_blobs() {
        let ic = InitialCondition {
            blobs: vec![],
            truncation_radius: 0.1,
        };
        for proj in [Projection::Radial, Projection::GridDft] {
            let f = initial_field_coefficients(&ic, 0.0025, 8, 1.0, FieldKind::Ecm, proj);
            for (j, m, l) in f.mode_indices() {
                let c = f.get(j, m, l);
                let expected = if (j, m, l) == (0, 0, 0) { 1.0 } else { 0.0 };
                assert!((c.re - expected).abs() < 1e-14 && c.im.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn initial_coefficients_are_hermitian() {
        let ic = InitialCondition::two_clusters([0.1, 0.1, 0.1]);
        for proj in [Projection::Radial, Projection::GridDft] {
            let f = initial_field_coefficients(&ic, 0.0025, 12, 1.0, FieldKind::Mde, proj);
            assert!(f.hermitian_defect() < 1e-14);
        }
    }

    #[test]
    fn zero_mode_is_exact_mean() {
        let ic = InitialCondition::single_centered();
        let m = initial_field_coefficients(&ic, 0.0025, 8, 1.0, FieldKind::Mde, Projection::Radial);
        let expected = 0.5 * compute_total_mass(&ic, 0.0025);
        assert!((m.get(0, 0, 0).re - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn projections_agree_on_a_resolved_blob() {
        // A wide blob is smooth enough for the sampled DFT to be accurate.
        let ic = InitialCondition {
            blobs: vec![Blob { center: [0.05, -0.02, 0.0], weight: 1.0 }],
            truncation_radius: 0.35,
        };
        let eps = 0.01;
        let a = initial_field_coefficients(&ic, eps, 8, 1.0, FieldKind::Mde, Projection::Radial);
        let b = initial_field_coefficients(&ic, eps, 8, 1.0, FieldKind::Mde, Projection::GridDft);
        let scale = a.get(0, 0, 0).norm();
        for (j, m, l) in a.mode_indices() {
            assert!((a.get(j, m, l) - b.get(j, m, l)).norm() < 1e-6 * scale);
        }
    }
}
