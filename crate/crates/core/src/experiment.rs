//! Experiment configuration and orchestration: single runs, comparisons
//! against the radial reference, parameter sweeps and integral identities.
//!
//! Every run writes into its own directory and finishes with a
//! `manifest.json` listing each artifact with its content hash and the hash
//! of the configuration that produced it. Wall-clock timings go to separate
//! files flagged in the manifest; everything else is reproducible bit for
//! bit from the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    bin_grid_field, bin_particles_radially, bin_reference_like, bin_spectral_field, fit_loglog_slope,
    integral_lnf_numerical, integral_lnf_reference, integral_m_numerical, integral_m_reference, relative_l2_error,
    write_fit_csv, ErrorReport, FitMode, RadialProfile, Snapshot,
};
use crate::error::{Error, Result};
use crate::fdm::{fdm_run_with, GridField};
use crate::params::{steps_for, InitialCondition, Projection, SimulationParams, Vec3};
use crate::radial::{radial_run, RadialGrid};
use crate::sipf::{run_with, GradMMode, SipfState};
use crate::spectral::QuadratureLattice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Sipf,
    Fdm,
    Radial,
    Compare,
    Sweep,
}

/// A 3D method measured against the radial reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sipf,
    Fdm,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Sipf => "sipf",
            Method::Fdm => "fdm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Dt,
    #[serde(alias = "P")]
    Particles,
    #[serde(alias = "H")]
    Modes,
    /// Finite-difference grid points per side.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmSettings {
    /// Grid points per side.
    pub n: usize,
}

impl Default for FdmSettings {
    fn default() -> Self {
        Self { n: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSettings {
    /// Cells per unit radius.
    pub cells: usize,
    pub dt: f64,
    pub radius: f64,
    /// Where computed references are kept; defaults to `<out>/reference-cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            cells: 801,
            dt: 1e-3,
            radius: 1.0,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningSettings {
    pub bin_width: f64,
    pub r_max: f64,
    /// Per-axis size of the lattice on which spectral fields are sampled.
    pub lattice: usize,
}

impl Default for BinningSettings {
    fn default() -> Self {
        Self {
            bin_width: 0.02,
            r_max: 1.0,
            lattice: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    pub methods: Vec<Method>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sipf, Method::Fdm],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Defaults to the finite-difference solver for `grid`, SIPF otherwise.
    #[serde(default)]
    pub method: Option<Method>,
    /// Seeds averaged at every sweep point; defaults to the params seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Sweep points run concurrently.
    #[serde(default = "one_job")]
    pub jobs: usize,
}

fn one_job() -> usize {
    1
}

impl SweepSettings {
    pub fn method(&self) -> Method {
        self.method.unwrap_or(match self.axis {
            SweepAxis::Grid => Method::Fdm,
            _ => Method::Sipf,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub solver: SolverKind,
    #[serde(default)]
    pub params: SimulationParams,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Defaults to `[T]`.
    #[serde(default)]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default)]
    pub grad_m: GradMMode,
    #[serde(default)]
    pub projection: Projection,
    #[serde(default)]
    pub fdm: FdmSettings,
    #[serde(default)]
    pub reference: ReferenceSettings,
    #[serde(default)]
    pub binning: BinningSettings,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// A configuration with every block at its default.
    pub fn new(solver: SolverKind) -> Self {
        Self {
            solver,
            params: SimulationParams::default(),
            initial: InitialCondition::default(),
            output: None,
            snapshot_times: None,
            grad_m: GradMMode::default(),
            projection: Projection::default(),
            fdm: FdmSettings::default(),
            reference: ReferenceSettings::default(),
            binning: BinningSettings::default(),
            compare: CompareSettings::default(),
            sweep: None,
            threads: None,
        }
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshot_times.clone().unwrap_or_else(|| vec![self.params.t_final])
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.initial.validate(self.params.box_len)?;
        let times = self.snapshot_times();
        if times.is_empty() {
            return Err(Error::Config("snapshot_times must not be empty".into()));
        }
        for &t in &times {
            check_time(t, &self.params)?;
        }
        let b = &self.binning;
        if !(b.bin_width > 0.0 && b.r_max > b.bin_width) {
            return Err(Error::Config("binning needs 0 < bin_width < r_max".into()));
        }
        if b.lattice < self.params.modes || !b.lattice.is_multiple_of(2) {
            return Err(Error::Config(format!("binning lattice {} must be even and >= H", b.lattice)));
        }
        if self.fdm.n < 3 {
            return Err(Error::Config("fdm.n must be at least 3".into()));
        }
        let r = &self.reference;
        if r.cells < 2 || !(r.dt > 0.0) || !(r.radius > 0.0) {
            return Err(Error::Config("reference needs cells >= 2, dt > 0, radius > 0".into()));
        }
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(Error::Config("threads must be at least 1".into()));
            }
        }
        let uses_sipf = match self.solver {
            SolverKind::Sipf => true,
            SolverKind::Compare => self.compare.methods.contains(&Method::Sipf),
            SolverKind::Sweep => self.sweep.as_ref().is_some_and(|s| s.method() == Method::Sipf),
            _ => false,
        };
        if uses_sipf && self.params.dim != 3 {
            return Err(Error::Config("the particle-field solver needs dim = 3".into()));
        }
        if self.solver == SolverKind::Compare && self.compare.methods.is_empty() {
            return Err(Error::Config("compare needs at least one method".into()));
        }
        if self.solver == SolverKind::Sweep {
            let s = self
                .sweep
                .as_ref()
                .ok_or_else(|| Error::Config("solver `sweep` requires a [sweep] block".into()))?;
            if s.values.len() < 2 {
                return Err(Error::Config(format!("sweep needs at least 2 values, got {}", s.values.len())));
            }
            if s.jobs == 0 {
                return Err(Error::Config("sweep.jobs must be at least 1".into()));
            }
            for plan in self.plan()? {
                plan.params.validate()?;
                check_time(plan.params.t_final, &plan.params)?;
            }
        }
        Ok(())
    }

    /// The individual runs a sweep expands to, grouped by sweep value.
    pub fn plan(&self) -> Result<Vec<PlannedRun>> {
        let s = match (&self.solver, &self.sweep) {
            (SolverKind::Sweep, Some(s)) => s,
            _ => return Err(Error::Config("only sweeps have a run plan".into())),
        };
        let seeds = if s.seeds.is_empty() { vec![self.params.seed] } else { s.seeds.clone() };
        let mut out = Vec::new();
        for &v in &s.values {
            let as_count = |name: &str| -> Result<usize> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Config(format!("sweep over {name} needs positive integers, got {v}")))
                }
            };
            for &seed in &seeds {
                let mut params = SimulationParams { seed, ..self.params.clone() };
                let mut grid_n = self.fdm.n;
                let label = match s.axis {
                    SweepAxis::Dt => {
                        params.dt = v;
                        format!("dt={v}")
                    }
                    SweepAxis::Particles => {
                        params.particles = as_count("particles")?;
                        format!("P={v}")
                    }
                    SweepAxis::Modes => {
                        params.modes = as_count("modes")?;
                        format!("H={v}")
                    }
                    SweepAxis::Grid => {
                        grid_n = as_count("grid")?;
                        format!("n={v}")
                    }
                };
                out.push(PlannedRun {
                    label,
                    value: v,
                    method: s.method(),
                    params,
                    grid_n,
                });
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 of the configuration with output location and thread
    /// count stripped, neither of which affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.threads = None;
        c.reference.cache_dir = None;
        if let Some(s) = c.sweep.as_mut() {
            s.jobs = 1;
        }
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn check_time(t: f64, p: &SimulationParams) -> Result<()> {
    steps_for(t, p.dt)?;
    if t > p.t_final + 1e-12 * p.t_final.max(1.0) {
        return Err(Error::SnapshotTime { time: t, dt: p.dt });
    }
    Ok(())
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub value: f64,
    pub method: Method,
    pub params: SimulationParams,
    pub grid_n: usize,
}

/// Parses TOML, or JSON when the text starts with `{`, and validates.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?
    } else {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// One file written by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    /// Absent for timing files, whose content is not reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
}

/// Identity diagnostics at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityPoint {
    pub t: f64,
    pub int_m: f64,
    pub int_m_reference: f64,
    pub int_lnf: Option<f64>,
    pub int_lnf_reference: Option<f64>,
}

impl IdentityPoint {
    pub fn error_m(&self) -> f64 {
        (self.int_m - self.int_m_reference).abs() / self.int_m_reference.abs()
    }
}

/// Error of one method's `m` profile at one snapshot time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileError {
    pub label: String,
    pub t: f64,
    pub error: f64,
}

/// What a finished run hands back besides its files.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub manifest: Option<Manifest>,
    /// Final-time errors, one row per compared method or sweep value.
    pub report: ErrorReport,
    pub profile_errors: Vec<ProfileError>,
    /// Fitted slope of a sweep.
    pub slope: Option<f64>,
    /// Identity series per run label.
    pub identities: BTreeMap<String, Vec<IdentityPoint>>,
}

struct Writer {
    root: PathBuf,
    files: Vec<(String, bool)>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        self.emit(rel, false, body)
    }

    fn timing(&mut self, rel: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        self.emit(rel, true, body)
    }

    fn emit(&mut self, rel: &str, timing: bool, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let mut w = BufWriter::new(fs::File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.files.push((rel.to_string(), timing));
        Ok(())
    }

    fn absorb(&mut self, prefix: &str, other: Writer) {
        for (p, t) in other.files {
            self.files.push((format!("{prefix}/{p}"), t));
        }
    }

    fn finish(mut self, config_hash: String) -> Result<Manifest> {
        self.files.sort();
        let mut artifacts = Vec::with_capacity(self.files.len());
        for (path, timing) in &self.files {
            let sha256 = if *timing {
                None
            } else {
                Some(hex::encode(Sha256::digest(fs::read(self.root.join(path))?)))
            };
            artifacts.push(Artifact {
                path: path.clone(),
                sha256,
                timing: *timing,
            });
        }
        let m = Manifest { config_hash, artifacts };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(self.root.join("manifest.json"), text + "\n")?;
        Ok(m)
    }
}

fn tag(t: f64) -> String {
    format!("t{t:.4}")
}

fn profile_center(ic: &InitialCondition) -> Vec3 {
    let w: f64 = ic.blobs.iter().map(|b| b.weight).sum();
    if w == 0.0 {
        return [0.0; 3];
    }
    let mut c = [0.0; 3];
    for b in &ic.blobs {
        for d in 0..3 {
            c[d] += b.weight * b.center[d] / w;
        }
    }
    c
}

/// Radial reference snapshots, content-addressed by everything that
/// determines them.
pub fn reference_snapshots(cfg: &ExperimentConfig, times: &[f64], cache_dir: Option<&Path>) -> Result<Vec<RadialGrid>> {
    let r = &cfg.reference;
    let dr = 1.0 / r.cells as f64;
    #[derive(Serialize)]
    struct Key<'a> {
        params: SimulationParams,
        initial: &'a InitialCondition,
        cells: usize,
        dt: f64,
        radius: f64,
        times: &'a [f64],
    }
    // only the model constants matter; the discretization knobs are the reference's own
    let params = SimulationParams {
        dt: r.dt,
        particles: 1,
        modes: 2,
        seed: 0,
        dim: 3,
        box_len: 1.0,
        ..cfg.params.clone()
    };
    let key = Key {
        params: params.clone(),
        initial: &cfg.initial,
        cells: r.cells,
        dt: r.dt,
        radius: r.radius,
        times,
    };
    let hash = hex::encode(Sha256::digest(serde_json::to_string(&key).expect("key serializes").as_bytes()));
    let file = |dir: &Path, k: usize| dir.join(format!("{hash}-{k}.csv"));
    if let Some(dir) = cache_dir {
        if (0..times.len()).all(|k| file(dir, k).exists()) {
            return (0..times.len())
                .map(|k| RadialGrid::read_csv(BufReader::new(fs::File::open(file(dir, k))?)))
                .collect();
        }
    }
    let params = SimulationParams { t_final: times.iter().copied().fold(0.0, f64::max), ..params };
    let snaps = radial_run(&params, &cfg.initial, r.radius, dr, r.dt, times)?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir)?;
        for (k, s) in snaps.iter().enumerate() {
            // write then rename so concurrent sweep jobs never read a partial file
            let tmp = dir.join(format!("{hash}-{k}.csv.tmp{}", std::process::id()));
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            s.write_csv(&mut w)?;
            w.flush()?;
            drop(w);
            fs::rename(&tmp, file(dir, k))?;
        }
    }
    Ok(snaps)
}

/// Binned `m`, `rho`, `f` of a method snapshot plus the reference binned the
/// same way.
struct Binned {
    m: RadialProfile,
    rho: RadialProfile,
    f: RadialProfile,
    m_reference: Option<RadialProfile>,
}

fn bin_sipf(s: &SipfState, cfg: &ExperimentConfig, reference: Option<&RadialGrid>) -> Result<Binned> {
    let b = &cfg.binning;
    let c = profile_center(&cfg.initial);
    let m = bin_spectral_field(&s.m, b.lattice, c, b.bin_width, b.r_max)?;
    let f = bin_spectral_field(&s.f, b.lattice, c, b.bin_width, b.r_max)?;
    let rho = bin_particles_radially(&s.particles, c, b.bin_width, b.r_max)?;
    let m_reference = match reference {
        Some(r) => {
            let lat = QuadratureLattice::new(b.lattice, s.m.box_len());
            Some(bin_reference_like(r, &r.m, (0..lat.len()).map(|i| lat.node(i)), c, b.bin_width, b.r_max)?)
        }
        None => None,
    };
    Ok(Binned { m, rho, f, m_reference })
}

fn bin_fdm(g: &GridField, cfg: &ExperimentConfig, reference: Option<&RadialGrid>) -> Result<Binned> {
    let b = &cfg.binning;
    let c = profile_center(&cfg.initial);
    let m = bin_grid_field(g, &g.m, c, b.bin_width, b.r_max)?;
    let rho = bin_grid_field(g, &g.rho, c, b.bin_width, b.r_max)?;
    let f = bin_grid_field(g, &g.f, c, b.bin_width, b.r_max)?;
    let m_reference = match reference {
        Some(r) => Some(bin_reference_like(r, &r.m, (0..g.len()).map(|i| g.node(i)), c, b.bin_width, b.r_max)?),
        None => None,
    };
    Ok(Binned { m, rho, f, m_reference })
}

fn write_profiles(w: &mut Writer, dir: &str, t: f64, b: &Binned) -> Result<()> {
    let tg = tag(t);
    w.write(&format!("{dir}/profile_m_{tg}.csv"), |o| b.m.write_csv(o))?;
    w.write(&format!("{dir}/profile_rho_{tg}.csv"), |o| b.rho.write_csv(o))?;
    w.write(&format!("{dir}/profile_f_{tg}.csv"), |o| b.f.write_csv(o))?;
    if let Some(r) = &b.m_reference {
        w.write(&format!("{dir}/reference_m_{tg}.csv"), |o| r.write_csv(o))?;
    }
    Ok(())
}

fn identity_point(s: Snapshot<'_>, t: f64, params: &SimulationParams, ic: &InitialCondition) -> IdentityPoint {
    IdentityPoint {
        t,
        int_m: integral_m_numerical(s),
        int_m_reference: integral_m_reference(t, params, ic),
        int_lnf: integral_lnf_numerical(s).ok(),
        int_lnf_reference: integral_lnf_reference(t, params, ic).ok(),
    }
}

fn write_identity(w: &mut Writer, rel: &str, pts: &[IdentityPoint]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into());
    w.write(rel, |o| {
        writeln!(o, "t,int_m,int_m_reference,error_m,int_lnf,int_lnf_reference")?;
        for p in pts {
            writeln!(
                o,
                "{},{},{},{},{},{}",
                p.t,
                p.int_m,
                p.int_m_reference,
                p.error_m(),
                opt(p.int_lnf),
                opt(p.int_lnf_reference)
            )?;
        }
        Ok(())
    })
}

/// Result of one solver run inside a larger experiment.
struct MethodRun {
    label: String,
    errors: Vec<ProfileError>,
    identity: Vec<IdentityPoint>,
    seconds: f64,
    control: f64,
    spacing: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    w: &mut Writer,
    dir: &str,
    method: Method,
    cfg: &ExperimentConfig,
    params: &SimulationParams,
    grid_n: usize,
    times: &[f64],
    references: Option<&[RadialGrid]>,
    full_output: bool,
) -> Result<MethodRun> {
    let ic = &cfg.initial;
    let mut identity = Vec::new();
    let mut errors = Vec::new();
    let start = Instant::now();
    let label;
    let (control, spacing);
    match method {
        Method::Sipf => {
            label = "sipf".to_string();
            control = params.particles as f64;
            spacing = params.dt;
            let init = SipfState::initial_with(params, ic, cfg.grad_m, cfg.projection)?;
            let snaps = run_with(init, times, |s| {
                identity.push(identity_point(Snapshot::Sipf { m: &s.m, f: &s.f }, s.time(), params, ic))
            })?;
            for (k, s) in snaps.iter().enumerate() {
                let t = times[k];
                let binned = bin_sipf(s, cfg, references.map(|r| &r[k]))?;
                if let Some(r) = &binned.m_reference {
                    errors.push(ProfileError { label: label.clone(), t, error: relative_l2_error(&binned.m, r)? });
                }
                if full_output {
                    let tg = tag(t);
                    w.write(&format!("{dir}/particles_{tg}.csv"), |o| s.write_particles_csv(o))?;
                    w.write(&format!("{dir}/m_coeffs_{tg}.csv"), |o| s.m.write_csv(o))?;
                    w.write(&format!("{dir}/f_coeffs_{tg}.csv"), |o| s.f.write_csv(o))?;
                }
                write_profiles(w, dir, t, &binned)?;
            }
        }
        Method::Fdm => {
            label = format!("fdm n={grid_n}");
            control = grid_n as f64;
            spacing = 1.0 / (grid_n as f64 - 1.0);
            let snaps = fdm_run_with(params, ic, grid_n, times, |g| {
                identity.push(identity_point(Snapshot::Fdm(g), g.time, params, ic))
            })?;
            for (k, g) in snaps.iter().enumerate() {
                let t = times[k];
                let binned = bin_fdm(g, cfg, references.map(|r| &r[k]))?;
                if let Some(r) = &binned.m_reference {
                    errors.push(ProfileError { label: label.clone(), t, error: relative_l2_error(&binned.m, r)? });
                }
                if full_output {
                    let tg = tag(t);
                    for (name, v) in [("rho", &g.rho), ("f", &g.f), ("m", &g.m)] {
                        w.write(&format!("{dir}/{name}_{tg}.bin"), |o| g.write_binary(o, v))?;
                    }
                    w.write(&format!("{dir}/slice_{tg}.csv"), |o| g.write_axis_slice_csv(o))?;
                }
                write_profiles(w, dir, t, &binned)?;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    write_identity(w, &format!("{dir}/identity.csv"), &identity)?;
    Ok(MethodRun {
        label,
        errors,
        identity,
        seconds,
        control,
        spacing,
    })
}

fn run_radial(w: &mut Writer, cfg: &ExperimentConfig, times: &[f64], cache: Option<&Path>) -> Result<Vec<IdentityPoint>> {
    let snaps = reference_snapshots(cfg, times, cache)?;
    let b = &cfg.binning;
    let mut identity = Vec::new();
    for (g, &t) in snaps.iter().zip(times) {
        let tg = tag(t);
        w.write(&format!("radial/state_{tg}.csv"), |o| g.write_csv(o))?;
        for (name, u) in [("m", &g.m), ("rho", &g.rho), ("f", &g.f)] {
            let p = crate::diagnostics::bin_radial_grid(g, u, b.bin_width, b.r_max)?;
            w.write(&format!("radial/profile_{name}_{tg}.csv"), |o| p.write_csv(o))?;
        }
        identity.push(identity_point(Snapshot::Radial(g), t, &cfg.params, &cfg.initial));
    }
    write_identity(w, "radial/identity.csv", &identity)?;
    Ok(identity)
}

fn write_profile_errors(w: &mut Writer, rel: &str, errs: &[ProfileError]) -> Result<()> {
    w.write(rel, |o| {
        writeln!(o, "method,t,rel_l2_error")?;
        for e in errs {
            writeln!(o, "{},{},{}", e.label, e.t, e.error)?;
        }
        Ok(())
    })
}

fn cache_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.reference.cache_dir.clone().unwrap_or_else(|| out.join("reference-cache"))
}

/// Runs `cfg.solver` and writes its outputs under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let mut w = Writer::new(out)?;
    let mut clean = cfg.clone();
    clean.output = None;
    clean.threads = None;
    clean.reference.cache_dir = None;
    w.write("config.json", |o| writeln!(o, "{}", serde_json::to_string_pretty(&clean).expect("config serializes")))?;
    let times = cfg.snapshot_times();
    let cache = cache_dir(cfg, out);
    let mut outcome = Outcome::default();
    let mut timing: Vec<(String, f64)> = Vec::new();
    match cfg.solver {
        SolverKind::Sipf | SolverKind::Fdm => {
            let method = if cfg.solver == SolverKind::Sipf { Method::Sipf } else { Method::Fdm };
            let r = run_method(&mut w, method.name(), method, cfg, &cfg.params, cfg.fdm.n, &times, None, true)?;
            timing.push((r.label.clone(), r.seconds));
            outcome.identities.insert(r.label, r.identity);
        }
        SolverKind::Radial => {
            let start = Instant::now();
            let id = run_radial(&mut w, cfg, &times, Some(&cache))?;
            timing.push(("radial".into(), start.elapsed().as_secs_f64()));
            outcome.identities.insert("radial".into(), id);
        }
        SolverKind::Compare => {
            let start = Instant::now();
            let refs = reference_snapshots(cfg, &times, Some(&cache))?;
            timing.push(("reference".into(), start.elapsed().as_secs_f64()));
            let mut methods = cfg.compare.methods.clone();
            methods.sort();
            methods.dedup();
            let mut all = Vec::new();
            for m in methods {
                let r = run_method(&mut w, m.name(), m, cfg, &cfg.params, cfg.fdm.n, &times, Some(&refs), true)?;
                let last = r.errors.last().expect("at least one snapshot").error;
                outcome.report.push(r.label.clone(), r.control, r.spacing, r.seconds, last);
                timing.push((r.label.clone(), r.seconds));
                all.extend(r.errors);
                outcome.identities.insert(r.label, r.identity);
            }
            write_profile_errors(&mut w, "errors_by_time.csv", &all)?;
            let report = outcome.report.clone();
            w.write("report.csv", |o| report.write_errors_csv(o))?;
            w.timing("report_with_runtime.csv", |o| report.write_csv(o))?;
            outcome.profile_errors = all;
        }
        SolverKind::Sweep => run_sweep(cfg, &mut w, &cache, &mut outcome, &mut timing)?,
    }
    w.timing("timing.csv", |o| {
        writeln!(o, "phase,seconds")?;
        for (p, s) in &timing {
            writeln!(o, "{p},{s:.3}")?;
        }
        Ok(())
    })?;
    outcome.manifest = Some(w.finish(cfg.hash())?);
    Ok(outcome)
}

fn run_sweep(
    cfg: &ExperimentConfig,
    w: &mut Writer,
    cache: &Path,
    outcome: &mut Outcome,
    timing: &mut Vec<(String, f64)>,
) -> Result<()> {
    let sweep = cfg.sweep.as_ref().expect("validated");
    let plan = cfg.plan()?;
    let t_final = cfg.params.t_final;
    // the reference depends on neither dt, P, H nor the grid: one for the whole sweep
    let refs = reference_snapshots(cfg, &[t_final], Some(cache))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.jobs)
        .build()
        .map_err(|e| Error::Config(format!("sweep thread pool: {e}")))?;
    let root = w.root.clone();
    let results: Vec<Result<(Writer, MethodRun)>> = pool.install(|| {
        plan.par_iter()
            .enumerate()
            .map(|(k, run)| {
                let dir = format!("points/{k:03}");
                let mut sub = Writer::new(&root.join(&dir))?;
                let r = run_method(&mut sub, ".", run.method, cfg, &run.params, run.grid_n, &[t_final], Some(&refs), false)?;
                Ok((sub, r))
            })
            .collect()
    });
    let mut seed_rows = Vec::new();
    let mut by_value: Vec<(f64, String, Vec<f64>, f64, f64)> = Vec::new();
    for (k, (res, run)) in results.into_iter().zip(&plan).enumerate() {
        let (sub, r) = res?;
        let mut sub = sub;
        sub.files = sub.files.into_iter().map(|(p, t)| (p.trim_start_matches("./").to_string(), t)).collect();
        w.absorb(&format!("points/{k:03}"), sub);
        let e = r.errors.last().expect("final snapshot").error;
        seed_rows.push((run.label.clone(), run.params.seed, e));
        timing.push((format!("{} seed={}", run.label, run.params.seed), r.seconds));
        let spacing = match sweep.axis {
            SweepAxis::Grid => 1.0 / (run.value - 1.0),
            _ => run.value,
        };
        match by_value.last_mut() {
            Some(last) if last.1 == run.label => {
                last.2.push(e);
                last.3 += r.seconds;
            }
            _ => by_value.push((run.value, run.label.clone(), vec![e], r.seconds, spacing)),
        }
    }
    let mut points = Vec::new();
    for (value, label, errs, secs, spacing) in &by_value {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        outcome.report.push(label.clone(), *value, *spacing, *secs, mean);
        let x = match sweep.axis {
            SweepAxis::Grid => *spacing,
            _ => *value,
        };
        points.push((x, mean));
        outcome.profile_errors.push(ProfileError { label: label.clone(), t: t_final, error: mean });
    }
    let mode = if sweep.axis == SweepAxis::Modes { FitMode::SemiLog } else { FitMode::LogLog };
    let slope = fit_loglog_slope(&points, mode)?;
    outcome.slope = Some(slope);
    w.write("fit.csv", |o| write_fit_csv(o, &points, mode, slope))?;
    w.write("sweep_seeds.csv", |o| {
        writeln!(o, "setting,seed,rel_l2_error")?;
        for (l, s, e) in &seed_rows {
            writeln!(o, "{l},{s},{e}")?;
        }
        Ok(())
    })?;
    let report = outcome.report.clone();
    w.write("report.csv", |o| report.write_errors_csv(o))?;
    w.timing("report_with_runtime.csv", |o| report.write_csv(o))?;
    Ok(())
}

/// Integral identity time series for the configured solver(s), one value
/// per time step.
pub fn run_identity(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let methods: Vec<Method> = match cfg.solver {
        SolverKind::Sipf => vec![Method::Sipf],
        SolverKind::Fdm => vec![Method::Fdm],
        SolverKind::Compare => cfg.compare.methods.clone(),
        SolverKind::Radial => vec![],
        SolverKind::Sweep => return Err(Error::Config("identity runs need a single-run or compare solver".into())),
    };
    let mut w = Writer::new(out)?;
    let mut outcome = Outcome::default();
    let t = cfg.params.t_final;
    for m in methods {
        let mut identity = Vec::new();
        let ic = &cfg.initial;
        let p = &cfg.params;
        match m {
            Method::Sipf => {
                let init = SipfState::initial_with(p, ic, cfg.grad_m, cfg.projection)?;
                run_with(init, &[t], |s| identity.push(identity_point(Snapshot::Sipf { m: &s.m, f: &s.f }, s.time(), p, ic)))?;
            }
            Method::Fdm => {
                fdm_run_with(p, ic, cfg.fdm.n, &[t], |g| identity.push(identity_point(Snapshot::Fdm(g), g.time, p, ic)))?;
            }
        }
        write_identity(&mut w, &format!("identity_{}.csv", m.name()), &identity)?;
        outcome.identities.insert(m.name().into(), identity);
    }
    if cfg.solver == SolverKind::Radial {
        let steps = steps_for(t, cfg.reference.dt)?;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * cfg.reference.dt).collect();
        let snaps = radial_run(
            &SimulationParams { dt: cfg.reference.dt, ..cfg.params.clone() },
            &cfg.initial,
            cfg.reference.radius,
            1.0 / cfg.reference.cells as f64,
            cfg.reference.dt,
            &times,
        )?;
        let id: Vec<IdentityPoint> = snaps
            .iter()
            .zip(&times)
            .map(|(g, &t)| identity_point(Snapshot::Radial(g), t, &cfg.params, &cfg.initial))
            .collect();
        write_identity(&mut w, "identity_radial.csv", &id)?;
        outcome.identities.insert("radial".into(), id);
    }
    outcome.manifest = Some(w.finish(cfg.hash())?);
    Ok(outcome)
}

/// Machine-readable failure record written next to a run's outputs.
pub fn write_error_record(out: &Path, err: &Error) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let rec = serde_json::json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
    });
    fs::write(out.join("error.json"), rec.to_string() + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_params_block_gives_defaults() {
        let cfg = parse_config("solver = \"sipf\"\n[params]\n").unwrap();
        assert_eq!(cfg.params, SimulationParams::default());
        assert_eq!(cfg.params.d_n, 0.001);
        assert_eq!(cfg.params.eta, 10.0);
        assert_eq!(cfg.snapshot_times(), vec![4.0]);
    }

    #[test]
    fn zero_particles_rejected() {
        let e = parse_config("solver = \"sipf\"\n[params]\nP = 0\n").unwrap_err();
        assert!(matches!(e, Error::InvalidParam { name: "particles", .. }), "{e}");
    }

    #[test]
    fn unknown_keys_rejected_with_context() {
        let e = parse_config("solver = \"sipf\"\n[params]\nd_x = 1.0\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("d_x") && msg.contains("line 3"), "{msg}");
        assert!(parse_config("solver = \"sipf\"\ncolour = 1\n").is_err());
        let e = parse_config("{\"solver\": \"fdm\",\n \"bogus\": 1}").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn json_accepted() {
        let cfg = parse_config(r#"{"solver": "fdm", "params": {"dim": 2}, "fdm": {"n": 21}}"#).unwrap();
        assert_eq!(cfg.solver, SolverKind::Fdm);
        assert_eq!(cfg.params.dim, 2);
        assert_eq!(cfg.fdm.n, 21);
    }

    #[test]
    fn dt_sweep_expands_to_five_runs() {
        let cfg = parse_config(
            "solver = \"sweep\"\n[sweep]\naxis = \"dt\"\nvalues = [0.1, 0.05, 0.01, 0.005, 0.001]\n",
        )
        .unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.len(), 5);
        let dts: Vec<f64> = plan.iter().map(|p| p.params.dt).collect();
        assert_eq!(dts, vec![0.1, 0.05, 0.01, 0.005, 0.001]);
        assert!(plan.iter().all(|p| p.method == Method::Sipf && p.params.particles == 10_000));
    }

    #[test]
    fn sweep_invariants() {
        assert!(parse_config("solver = \"sweep\"\n").is_err());
        assert!(parse_config("solver = \"sweep\"\n[sweep]\naxis = \"H\"\nvalues = [8]\n").is_err());
        assert!(parse_config("solver = \"sweep\"\n[sweep]\naxis = \"H\"\nvalues = [8, 9]\n").is_err());
        assert!(parse_config("solver = \"sweep\"\n[sweep]\naxis = \"dt\"\nvalues = [0.1, 0.03]\n").is_err());
        let cfg = parse_config("solver = \"sweep\"\n[sweep]\naxis = \"P\"\nvalues = [50, 100]\nseeds = [1, 2, 3]\n").unwrap();
        assert_eq!(cfg.plan().unwrap().len(), 6);
        let cfg = parse_config("solver = \"sweep\"\n[sweep]\naxis = \"grid\"\nvalues = [21, 41]\n").unwrap();
        assert_eq!(cfg.plan().unwrap()[1].method, Method::Fdm);
        assert!(parse_config("solver = \"particles\"\n").is_err());
    }

    #[test]
    fn snapshot_times_checked() {
        assert!(parse_config("solver = \"fdm\"\nsnapshot_times = [0.015]\n").is_err());
        assert!(parse_config("solver = \"fdm\"\nsnapshot_times = [5.0]\n").is_err());
        assert!(parse_config("solver = \"fdm\"\nsnapshot_times = [0.0, 1.0]\n").is_ok());
    }

    #[test]
    fn sipf_needs_three_dimensions() {
        assert!(parse_config("solver = \"sipf\"\n[params]\ndim = 2\n").is_err());
        assert!(parse_config("solver = \"fdm\"\n[params]\ndim = 2\n").is_ok());
    }

    #[test]
    fn hash_ignores_output_and_threads() {
        let mut a = ExperimentConfig::new(SolverKind::Sipf);
        let h = a.hash();
        a.output = Some("x".into());
        a.threads = Some(3);
        assert_eq!(a.hash(), h);
        a.params.seed += 1;
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn zero_final_time_emits_initial_snapshot_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(SolverKind::Sipf);
        cfg.params.t_final = 0.0;
        cfg.params.particles = 100;
        cfg.params.modes = 8;
        let out = run_experiment(&cfg, dir.path()).unwrap();
        let files: Vec<String> = out.manifest.unwrap().artifacts.into_iter().map(|a| a.path).collect();
        assert!(files.contains(&"sipf/particles_t0.0000.csv".to_string()));
        assert!(files.iter().filter(|f| f.starts_with("sipf/particles_")).count() == 1);
        assert_eq!(out.identities["sipf"].len(), 1);
    }

    #[test]
    fn error_record_is_json() {
        let dir = tempfile::tempdir().unwrap();
        write_error_record(dir.path(), &Error::ZeroReference).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
        assert_eq!(v["kind"], "zero_reference");
        assert_eq!(v["status"], "error");
    }
}
