//! Experiment drivers on the forced periodic testbed: truth generation,
//! truncation-rate tables, nudging sweeps, inaccurate-basis and adaptive
//! studies, and a quick verification suite.
//!
//! The testbed is Kolmogorov flow `f = (A sin(k y), 0)` on a square
//! periodic box, spun up from a seeded random state until it settles on a
//! time-periodic orbit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dns::{dns_run, dns_run_with, spin_up, temporal_order_check, DnsConfig, Forcing, InitialCondition, SnapshotSet, TimeScheme};
use crate::error::{Error, Result};
use crate::field::{b_star, gradient, Grid, VelocityField};
use crate::observation::{CoarseMesh, ObservationStream};
use crate::pod::{build_pod, windowed_snapshots, PodBasis};
use crate::rom::{assemble, run, AdaptiveSettings, DaConfig, DaRun, PicardSettings, RomOperators, RomStepper, TruthReference};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RateTable,
    MuSweep,
    InaccurateBasis,
    AdaptiveCompare,
    Verify,
}

/// Top-level experiment description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub dns: DnsSection,
    #[serde(default)]
    pub observation: ObservationSection,
    #[serde(default)]
    pub pod: PodSection,
    #[serde(default)]
    pub darom: DaromSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnsSection {
    pub n: usize,
    pub length: f64,
    pub nu: f64,
    pub dt: f64,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub seed: u64,
    /// Transient is integrated on a coarser grid first.
    pub spinup_n: usize,
    pub spinup_time: f64,
    /// Fine-grid settling runs in chunks of this length until successive
    /// energy peaks agree to `periodic_tol`.
    pub settle_time: f64,
    pub settle_max_time: f64,
    pub periodic_tol: f64,
    pub window_periods: f64,
    pub snapshot_stride: usize,
    /// Snapshot file whose last field replaces the coarse spin-up.
    pub start_file: Option<PathBuf>,
}

impl Default for DnsSection {
    fn default() -> Self {
        DnsSection {
            n: 128,
            length: 2.0 * PI,
            nu: 0.035,
            dt: 0.01,
            amplitude: 1.0,
            wavenumber: 4,
            seed: 7,
            spinup_n: 64,
            spinup_time: 250.0,
            settle_time: 50.0,
            settle_max_time: 400.0,
            periodic_tol: 0.01,
            window_periods: 2.0,
            snapshot_stride: 10,
            start_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    /// Coarse cells across the box, `H = length / cells`.
    pub cells: usize,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        ObservationSection { cells: 20, noise_std: 0.0, noise_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodSection {
    pub rank_tol: f64,
    /// Fractions of one period used for the inaccurate bases.
    pub fractions: Vec<f64>,
}

impl Default for PodSection {
    fn default() -> Self {
        PodSection { rank_tol: 1e-12, fractions: vec![0.64, 0.84] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaromSection {
    pub r: usize,
    pub r_list: Vec<usize>,
    pub mu: f64,
    pub mu_list: Vec<f64>,
    pub stepper: RomStepper,
    /// DNS steps per reduced step.
    pub obs_stride: usize,
    /// Run length in units of the snapshot window.
    pub horizon: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub adaptive: AdaptiveSection,
}

impl Default for DaromSection {
    fn default() -> Self {
        DaromSection {
            r: 16,
            r_list: vec![4, 6, 8, 10, 12],
            mu: 100.0,
            mu_list: vec![0.0, 10.0, 100.0],
            stepper: RomStepper::Bdf2,
            obs_stride: 1,
            horizon: 1.0,
            picard_tol: 1e-10,
            picard_max_iters: 25,
            adaptive: AdaptiveSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub mu0: f64,
    pub check_stride: usize,
    pub mu_step: f64,
    pub energy_band: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let d = AdaptiveSettings::default();
        AdaptiveSection {
            mu0: 100.0,
            check_stride: d.check_stride,
            mu_step: d.mu_step,
            energy_band: d.energy_band,
            mu_min: d.mu_min,
            mu_max: d.mu_max,
        }
    }
}

impl AdaptiveSection {
    pub fn settings(&self) -> AdaptiveSettings {
        AdaptiveSettings {
            check_stride: self.check_stride,
            mu_step: self.mu_step,
            energy_band: self.energy_band,
            mu_min: self.mu_min,
            mu_max: self.mu_max,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            dns: DnsSection::default(),
            observation: ObservationSection::default(),
            pod: PodSection::default(),
            darom: DaromSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hash_text(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dns;
        if d.n < 8 || d.n % 2 != 0 || d.spinup_n < 8 || d.spinup_n % 2 != 0 {
            return Err(config_err("dns.n and dns.spinup_n must be even and at least 8"));
        }
        for (name, v) in [("length", d.length), ("nu", d.nu), ("dt", d.dt), ("window_periods", d.window_periods)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(format!("dns.{name} must be positive, got {v}")));
            }
        }
        if !(d.spinup_time >= 0.0) || !(d.settle_time > 0.0) || !(d.settle_max_time >= d.settle_time) {
            return Err(config_err(
                "dns.spinup_time must be non-negative, dns.settle_time positive and dns.settle_max_time >= dns.settle_time",
            ));
        }
        if !(d.periodic_tol > 0.0) {
            return Err(config_err("dns.periodic_tol must be positive"));
        }
        if d.snapshot_stride == 0 {
            return Err(config_err("dns.snapshot_stride must be at least 1"));
        }
        if let Some(p) = &d.start_file {
            if !p.exists() {
                return Err(config_err(format!("dns.start_file {} does not exist", p.display())));
            }
        }
        let o = &self.observation;
        if o.cells == 0 || !(o.noise_std >= 0.0) {
            return Err(config_err("observation.cells must be positive and noise_std non-negative"));
        }
        let p = &self.pod;
        if p.fractions.is_empty() || p.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err("pod.fractions must be a non-empty list in (0, 1]"));
        }
        let a = &self.darom;
        if a.r == 0 || a.r_list.is_empty() || a.r_list.contains(&0) {
            return Err(config_err("darom.r and darom.r_list entries must be positive"));
        }
        if a.r_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("darom.r_list must be strictly increasing"));
        }
        if a.mu_list.is_empty() || a.mu_list.iter().any(|m| !(*m >= 0.0)) || !(a.mu >= 0.0) {
            return Err(config_err("darom.mu and darom.mu_list must be non-negative, the list non-empty"));
        }
        if a.obs_stride == 0 || !(a.horizon > 0.0) || a.picard_max_iters == 0 || !(a.picard_tol > 0.0) {
            return Err(config_err("darom.obs_stride, horizon, picard_tol and picard_max_iters must be positive"));
        }
        let ad = &a.adaptive;
        if !(ad.mu0 >= 0.0) || !(ad.mu_min >= 0.0) || !(ad.energy_band > 0.0) || ad.check_stride == 0 || !(ad.mu_max >= ad.mu_min) {
            return Err(config_err("darom.adaptive: need mu0, mu_min >= 0, energy_band > 0, check_stride >= 1, mu_max >= mu_min"));
        }
        Ok(())
    }

    pub fn forcing(&self) -> Forcing {
        Forcing::Kolmogorov { amplitude: self.dns.amplitude, wavenumber: self.dns.wavenumber }
    }

    pub fn picard(&self) -> PicardSettings {
        PicardSettings { tol: self.darom.picard_tol, max_iters: self.darom.picard_max_iters }
    }

    /// Reduced time step.
    pub fn da_dt(&self) -> f64 {
        self.dns.dt * self.darom.obs_stride as f64
    }

    /// Reduced run settings for constant `mu` over `t_end`.
    pub fn da_config(&self, mu: f64, t_end: f64) -> DaConfig {
        DaConfig {
            mu0: mu,
            dt: self.da_dt(),
            t_end,
            stepper: self.darom.stepper,
            picard: self.picard(),
            adaptive: None,
        }
    }
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Upstream artifact hashes embedded in every report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.entries.push((key.to_string(), value.into()));
        self
    }

    /// `# key: value` lines.
    pub fn header(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }
}

/// Truth trajectory of the testbed over the snapshot window.
#[derive(Clone, Debug)]
pub struct Truth {
    pub config: ExperimentConfig,
    pub grid: Arc<Grid>,
    pub mesh: CoarseMesh,
    /// Settled state at window time zero.
    pub start: VelocityField,
    pub period: f64,
    /// Window length, a whole number of snapshot intervals.
    pub window: f64,
    pub snapshots: SnapshotSet,
    /// Observations at every reduced step over the window.
    pub observations: ObservationStream,
}

fn round_to(t: f64, step: f64) -> f64 {
    (t / step).round() * step
}

impl Truth {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Truth> {
        cfg.validate()?;
        let d = &cfg.dns;
        let grid = Grid::new(d.n, d.n, d.length, d.length)?;
        let mesh = CoarseMesh::with_cells(&grid, cfg.observation.cells)?;
        let forcing = cfg.forcing();

        let coarse_start = match &d.start_file {
            Some(p) => crate::io::read_snapshots(p)?
                .fields
                .pop()
                .ok_or_else(|| config_err(format!("{} holds no snapshots", p.display())))?,
            None => {
                let coarse = Grid::new(d.spinup_n, d.spinup_n, d.length, d.length)?;
                let mut c = DnsConfig::new(coarse, d.nu, d.dt, d.spinup_time);
                c.forcing = forcing.clone();
                c.initial_condition = InitialCondition::RandomSeeded(d.seed);
                c.store_snapshots = false;
                c.snapshot_stride = usize::MAX;
                log::info!("spin-up on {0}x{0} for t = {1}", d.spinup_n, d.spinup_time);
                dns_run(&c)?.final_field
            }
        };
        let fine_start = coarse_start.resample(&grid)?;

        let mut settle = DnsConfig::new(grid.clone(), d.nu, d.dt, d.settle_time);
        settle.forcing = forcing.clone();
        settle.initial_condition = InitialCondition::Field(fine_start);
        log::info!("settling on {0}x{0} until energy peaks agree to {1}", d.n, d.periodic_tol);
        let (start, settled_at, period) = spin_up(&settle, d.settle_time, d.settle_max_time, d.periodic_tol)?;
        let period = period.ok_or(Error::PeriodNotFound)?;
        log::info!("periodic after t = {settled_at:.2}");
        let snap_dt = d.dt * d.snapshot_stride as f64;
        let window = round_to(d.window_periods * period, snap_dt).max(snap_dt);
        log::info!("period {period:.4}, window {window:.4}");

        let mut truth = Truth {
            config: cfg.clone(),
            grid: grid.clone(),
            mesh,
            start,
            period,
            window,
            snapshots: SnapshotSet::new(grid.clone(), vec![], vec![], String::new())?,
            observations: ObservationStream {
                times: vec![],
                coarse_values: vec![],
                true_energy: vec![],
                mesh: CoarseMesh::with_cells(&grid, cfg.observation.cells)?,
                provenance: String::new(),
            },
        };
        let (obs, _, snaps) = truth.trajectory(window, None, Some(d.snapshot_stride))?;
        truth.snapshots = snaps.expect("snapshots requested");
        truth.observations = obs;
        Ok(truth)
    }

    fn dns_config(&self, t_end: f64) -> DnsConfig {
        let d = &self.config.dns;
        let mut c = DnsConfig::new(self.grid.clone(), d.nu, d.dt, t_end);
        c.forcing = self.config.forcing();
        c.initial_condition = InitialCondition::Field(self.start.clone());
        c.scheme = TimeScheme::Bdf2;
        c.snapshot_stride = 1;
        c.store_snapshots = false;
        c
    }

    fn trajectory(
        &self,
        t_end: f64,
        projector: Option<(&PodBasis, usize)>,
        snapshot_stride: Option<usize>,
    ) -> Result<(ObservationStream, Option<TruthReference>, Option<SnapshotSet>)> {
        let cfg = &self.config;
        let dns = self.dns_config(t_end);
        let stride = cfg.darom.obs_stride;
        let mut obs = ObservationStream {
            times: vec![],
            coarse_values: vec![],
            true_energy: vec![],
            mesh: self.mesh.clone(),
            provenance: dns.hash(),
        };
        let mut reference = projector.map(|_| TruthReference { coeffs: vec![], norm_sq: vec![] });
        let mut snap_times = vec![];
        let mut snap_fields = vec![];
        let mut failure = None;
        dns_run_with(&dns, |t, field| {
            let k = (t / cfg.dns.dt).round() as usize;
            if k % stride == 0 {
                match self.mesh.interpolate(field) {
                    Ok(m) => {
                        obs.times.push(t);
                        obs.coarse_values.push(m);
                        obs.true_energy.push(field.energy());
                    }
                    Err(e) => failure = Some(e),
                }
                if let (Some(reference), Some((basis, r))) = (reference.as_mut(), projector) {
                    if let Err(e) = reference.push(basis, r, field) {
                        failure = Some(e);
                    }
                }
            }
            if let Some(s) = snapshot_stride {
                if k % s == 0 {
                    snap_times.push(t);
                    snap_fields.push(field.clone());
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if cfg.observation.noise_std > 0.0 {
            obs = obs.with_noise(cfg.observation.noise_std, cfg.observation.noise_seed)?;
        }
        let snaps = match snapshot_stride {
            Some(_) => Some(SnapshotSet::new(self.grid.clone(), snap_times, snap_fields, dns.hash())?),
            None => None,
        };
        Ok((obs, reference, snaps))
    }

    /// Re-runs the truth from the window start to `t_end`, returning the
    /// observations and, when a basis is given, the truth reference for
    /// error diagnostics.
    pub fn replay(
        &self,
        t_end: f64,
        projector: Option<(&PodBasis, usize)>,
    ) -> Result<(ObservationStream, Option<TruthReference>)> {
        let t_end = round_to(t_end, self.config.da_dt());
        let (obs, reference, _) = self.trajectory(t_end, projector, None)?;
        Ok((obs, reference))
    }

    /// Largest truth norm `||u(t)||` over a stream.
    pub fn max_norm(obs: &ObservationStream) -> f64 {
        obs.true_energy.iter().map(|e| (2.0 * e).sqrt()).fold(0.0, f64::max)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::default()
            .with("config", self.config.hash())
            .with("snapshots", self.snapshots.content_hash())
            .with("observations", self.observations.provenance.clone())
            .with("period", format!("{:.6}", self.period))
            .with("window", format!("{:.6}", self.window))
    }

    /// Window length rounded to the reduced step.
    pub fn horizon(&self) -> f64 {
        round_to(self.window * self.config.darom.horizon, self.config.da_dt())
    }
}

/// Everything a reduced run needs for one basis.
pub struct Assembled {
    pub basis: PodBasis,
    pub ops: RomOperators,
    pub observations: ObservationStream,
    pub reference: TruthReference,
}

/// Basis from `snapshots`, operators of rank `r`, and aligned truth data
/// over `t_end`.
pub fn assemble_for(truth: &Truth, snapshots: &SnapshotSet, r: usize, t_end: f64) -> Result<Assembled> {
    let cfg = &truth.config;
    let basis = build_pod(snapshots, cfg.pod.rank_tol)?;
    if r > basis.dim() {
        return Err(Error::Range(format!("rank {r} exceeds basis dimension {}", basis.dim())));
    }
    let ops = assemble(&basis, r, &truth.mesh, cfg.dns.nu, &cfg.forcing())?;
    let (observations, reference) = truth.replay(t_end, Some((&basis, r)))?;
    Ok(Assembled { basis, ops, observations, reference: reference.expect("projector given") })
}

fn truncate_reference(reference: &TruthReference, r: usize) -> TruthReference {
    TruthReference {
        coeffs: reference.coeffs.iter().map(|c| c[..r].to_vec()).collect(),
        norm_sq: reference.norm_sq.clone(),
    }
}

/// `log(e_k / e_{k-1}) / log(t_k / t_{k-1})`; equal errors give rate 0
/// and are flagged, as are equal tails (rate undefined).
pub fn convergence_rate(err_prev: f64, err: f64, tail_prev: f64, tail: f64) -> (Option<f64>, bool) {
    if err == err_prev {
        return (Some(0.0), true);
    }
    if tail == tail_prev || !(err > 0.0 && err_prev > 0.0 && tail > 0.0 && tail_prev > 0.0) {
        return (None, true);
    }
    ((Some((err / err_prev).ln() / (tail / tail_prev).ln())), false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub r: usize,
    pub tail: f64,
    pub error: Option<f64>,
    pub rate: Option<f64>,
    /// Time-averaged error over the window, reported alongside.
    pub mean_error: Option<f64>,
    pub mean_rate: Option<f64>,
    pub flagged: bool,
    pub failure: Option<String>,
}

/// Final-time error against the eigentail, one row per rank. The
/// time-averaged error and its rate ride along for comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub mu: f64,
    pub t_end: f64,
    pub provenance: Provenance,
}

impl RateTable {
    /// Builds rows from measured tails and `(final, time-averaged)` errors
    /// (`Err` = failed run).
    pub fn from_measurements(
        ranks: &[usize],
        tails: &[f64],
        errors: &[std::result::Result<(f64, f64), String>],
    ) -> Vec<RateRow> {
        let mut rows: Vec<RateRow> = Vec::with_capacity(ranks.len());
        for k in 0..ranks.len() {
            let ((error, mean_error), failure) = match &errors[k] {
                Ok((e, m)) => ((Some(*e), Some(*m)), None),
                Err(m) => ((None, None), Some(m.clone())),
            };
            let prev = rows.last();
            let (rate, flagged) = match (k, error, prev.and_then(|p| p.error)) {
                (0, ..) => (None, false),
                (_, Some(e), Some(ep)) => convergence_rate(ep, e, tails[k - 1], tails[k]),
                _ => (None, true),
            };
            let mean_rate = match (k, mean_error, prev.and_then(|p| p.mean_error)) {
                (0, ..) => None,
                (_, Some(e), Some(ep)) => convergence_rate(ep, e, tails[k - 1], tails[k]).0,
                _ => None,
            };
            rows.push(RateRow { r: ranks[k], tail: tails[k], error, rate, mean_error, mean_rate, flagged, failure });
        }
        rows
    }

    pub fn rates(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.rate).collect()
    }

    pub fn mean_rate(&self) -> Option<f64> {
        let r = self.rates();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.provenance.header();
        let _ = writeln!(out, "# mu: {}\n# t_end: {}", self.mu, self.t_end);
        out.push_str("r,eigentail,error,rate,mean_error,mean_rate,note\n");
        for row in &self.rows {
            let err = row.error.map(|e| format!("{e:.6e}")).unwrap_or_default();
            let rate = row.rate.map(|e| format!("{e:.4}")).unwrap_or_default();
            let merr = row.mean_error.map(|e| format!("{e:.6e}")).unwrap_or_default();
            let mrate = row.mean_rate.map(|e| format!("{e:.4}")).unwrap_or_default();
            let note = match (&row.failure, row.flagged) {
                (Some(f), _) => format!("failed: {}", f.replace(',', ";")),
                (None, true) => "flagged".to_string(),
                _ => String::new(),
            };
            let _ = writeln!(out, "{},{:.6e},{err},{rate},{merr},{mrate},{note}", row.r, row.tail);
        }
        out
    }
}

/// Truncation study: DA-ROM with `darom.mu` for every rank in
/// `darom.r_list`, error measured at the end of the window.
pub fn rate_table(truth: &Truth) -> Result<RateTable> {
    let cfg = &truth.config;
    let r_max = *cfg.darom.r_list.last().expect("validated non-empty");
    let t_end = truth.horizon();
    let asm = assemble_for(truth, &truth.snapshots, r_max, t_end)?;
    let ranks = &cfg.darom.r_list;
    let tails = ranks.iter().map(|&r| asm.basis.eigentail(r)).collect::<Result<Vec<_>>>()?;
    let errors: Vec<std::result::Result<(f64, f64), String>> = ranks
        .par_iter()
        .map(|&r| {
            let ops = asm.ops.truncate(r).map_err(|e| e.to_string())?;
            let reference = truncate_reference(&asm.reference, r);
            let out = run(&ops, &cfg.da_config(cfg.darom.mu, t_end), &asm.observations, Some(&reference), None)
                .map_err(|e| e.to_string())?;
            out.final_l2_error()
                .zip(out.mean_l2_error())
                .ok_or_else(|| "no error recorded".to_string())
        })
        .collect();
    Ok(RateTable {
        rows: RateTable::from_measurements(ranks, &tails, &errors),
        mu: cfg.darom.mu,
        t_end,
        provenance: truth.provenance().with("basis", asm.basis.provenance.clone()),
    })
}

/// Per-run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub mu0: f64,
    pub mean_energy_error: f64,
    pub mean_relative_energy_error: f64,
    pub mean_l2_error: Option<f64>,
    pub final_l2_error: Option<f64>,
    pub max_norm: f64,
    pub mu_changes: usize,
}

impl SweepRow {
    pub fn of(label: String, mu0: f64, run: &DaRun) -> Self {
        SweepRow {
            label,
            mu0,
            mean_energy_error: run.mean_energy_error(),
            mean_relative_energy_error: run.mean_relative_energy_error(),
            mean_l2_error: run.mean_l2_error(),
            final_l2_error: run.final_l2_error(),
            max_norm: run.max_norm,
            mu_changes: run.mu_changes(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub title: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<DaRun>,
    pub provenance: Provenance,
}

impl SweepReport {
    /// Row with the smallest time-averaged relative energy error among
    /// constant-`mu` runs.
    pub fn best_constant(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.label.starts_with("mu="))
            .min_by(|a, b| a.mean_relative_energy_error.total_cmp(&b.mean_relative_energy_error))
    }

    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = self.provenance.header();
        let mus: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        let _ = writeln!(out, "# {}\n# runs: {}", self.title, mus.join(" "));
        out.push_str("label,mu0,mean_energy_error,mean_relative_energy_error,mean_l2_error,final_l2_error,max_norm,mu_changes\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6e},{:.6e},{},{},{:.6e},{}",
                r.label,
                r.mu0,
                r.mean_energy_error,
                r.mean_relative_energy_error,
                opt(r.mean_l2_error),
                opt(r.final_l2_error),
                r.max_norm,
                r.mu_changes
            );
        }
        out
    }
}

fn mu_label(mu: f64) -> String {
    format!("mu={mu}")
}

fn sweep_runs(cfg: &ExperimentConfig, asm: &Assembled, t_end: f64, mus: &[f64]) -> Result<Vec<(String, f64, DaRun)>> {
    mus.par_iter()
        .map(|&mu| {
            let out = run(&asm.ops, &cfg.da_config(mu, t_end), &asm.observations, Some(&asm.reference), None)?;
            Ok((mu_label(mu), mu, out))
        })
        .collect()
}

fn report(title: String, runs: Vec<(String, f64, DaRun)>, provenance: Provenance) -> SweepReport {
    let rows = runs.iter().map(|(l, mu, r)| SweepRow::of(l.clone(), *mu, r)).collect();
    SweepReport { title, rows, runs: runs.into_iter().map(|x| x.2).collect(), provenance }
}

/// Constant-`mu` sweep over `darom.mu_list` with the full basis.
pub fn mu_sweep_report(truth: &Truth) -> Result<SweepReport> {
    let cfg = &truth.config;
    let t_end = truth.horizon();
    let asm = assemble_for(truth, &truth.snapshots, cfg.darom.r, t_end)?;
    let runs = sweep_runs(cfg, &asm, t_end, &cfg.darom.mu_list)?;
    let prov = truth.provenance().with("basis", asm.basis.provenance.clone()).with("operators", asm.ops.provenance.clone());
    Ok(report(format!("mu sweep, r = {}", cfg.darom.r), runs, prov))
}

/// Sweeps with bases built from `pod.fractions` of one period.
pub fn inaccurate_basis_study(truth: &Truth) -> Result<Vec<(f64, SweepReport)>> {
    let cfg = &truth.config;
    let t_end = truth.horizon();
    cfg.pod
        .fractions
        .iter()
        .map(|&fraction| {
            let snaps = windowed_snapshots(&truth.snapshots, fraction, Some(truth.period))?;
            let asm = assemble_for(truth, &snaps, cfg.darom.r, t_end)?;
            let runs = sweep_runs(cfg, &asm, t_end, &cfg.darom.mu_list)?;
            let prov = truth
                .provenance()
                .with("basis", asm.basis.provenance.clone())
                .with("basis_snapshots", snaps.len().to_string());
            Ok((fraction, report(format!("basis from {fraction} of a period, r = {}", cfg.darom.r), runs, prov)))
        })
        .collect()
}

/// Constant-`mu` sweep plus one adaptive run starting at `adaptive.mu0`.
pub fn adaptive_compare(truth: &Truth) -> Result<SweepReport> {
    let cfg = &truth.config;
    let t_end = truth.horizon();
    let asm = assemble_for(truth, &truth.snapshots, cfg.darom.r, t_end)?;
    let mut runs = sweep_runs(cfg, &asm, t_end, &cfg.darom.mu_list)?;
    let mut da = cfg.da_config(cfg.darom.adaptive.mu0, t_end);
    da.adaptive = Some(cfg.darom.adaptive.settings());
    let adaptive = run(&asm.ops, &da, &asm.observations, Some(&asm.reference), None)?;
    runs.push(("adaptive".to_string(), cfg.darom.adaptive.mu0, adaptive));
    let prov = truth.provenance().with("basis", asm.basis.provenance.clone()).with("operators", asm.ops.provenance.clone());
    Ok(report(format!("adaptive vs constant mu, r = {}", cfg.darom.r), runs, prov))
}

/// Log-linear fit of the error decay before the plateau.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    /// Fitted exponential rate (positive for decay).
    pub rate: f64,
    pub r_squared: f64,
    pub plateau: f64,
    pub start: usize,
    pub end: usize,
}

/// The plateau is the median of the second half of `errors`. The decay
/// phase runs from the largest error among the first tenth of the series
/// to the first point within twice the plateau.
pub fn fit_exponential_decay(times: &[f64], errors: &[f64]) -> Option<DecayFit> {
    let n = errors.len();
    if n < 8 || times.len() != n {
        return None;
    }
    let mut tail: Vec<f64> = errors[n / 2..].to_vec();
    tail.sort_by(f64::total_cmp);
    let plateau = tail[tail.len() / 2];
    let head = (n / 10).max(1);
    let start = (0..head).max_by(|&a, &b| errors[a].total_cmp(&errors[b]))?;
    let end = (start..n).find(|&k| errors[k] <= 2.0 * plateau)?;
    if end < start + 2 {
        return None;
    }
    let x = &times[start..=end];
    let y: Vec<f64> = errors[start..=end].iter().map(|e| e.ln()).collect();
    let (slope, r2) = linear_fit(x, &y);
    Some(DecayFit { rate: -slope, r_squared: r2, plateau, start, end })
}

/// Least-squares slope and coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Quick self-checks of the numerical building blocks on small grids.
pub fn verify() -> Result<Vec<Check>> {
    use rand::SeedableRng;
    let mut checks = Vec::new();
    let grid = Grid::square(16)?;
    for (scheme, lo, hi, name) in [
        (TimeScheme::Bdf2, 1.8, 2.2, "dns order (bdf2)"),
        (TimeScheme::BackwardEuler, 0.8, 1.2, "dns order (backward euler)"),
    ] {
        let mut c = DnsConfig::new(grid.clone(), 0.1, 0.05, 1.0);
        c.scheme = scheme;
        let oc = temporal_order_check(&c, 4)?;
        checks.push(Check {
            name: name.into(),
            passed: (lo..=hi).contains(&oc.rate),
            detail: format!("rate {:.3}", oc.rate),
        });
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = VelocityField::random_band_limited(&grid, 5, &mut rng);
        let v = VelocityField::random_band_limited(&grid, 5, &mut rng);
        let scale = w.norm_l2() * gradient(&v).norm_sq();
        worst = worst.max(b_star(&w, &v, &v)?.abs() / scale);
    }
    checks.push(Check { name: "skew symmetry".into(), passed: worst <= 1e-12, detail: format!("max ratio {worst:.2e}") });

    let fields: Vec<VelocityField> = (0..8).map(|_| VelocityField::random_band_limited(&grid, 4, &mut rng)).collect();
    let times = (0..fields.len()).map(|k| k as f64).collect();
    let snaps = SnapshotSet::new(grid.clone(), times, fields, "verify".into())?;
    let basis = build_pod(&snaps, 1e-12)?;
    let mut worst = 0.0f64;
    for r in 1..=basis.dim() {
        let mse: f64 = snaps
            .fields
            .iter()
            .map(|f| basis.project(r, f).and_then(|p| f.sub(&p.lifted)).map(|e| e.norm_l2().powi(2)))
            .sum::<Result<f64>>()?;
        let tail = basis.eigenvalue_tail(r);
        let total: f64 = basis.eigenvalues.iter().sum();
        worst = worst.max((mse - tail).abs() / total);
    }
    checks.push(Check { name: "pod optimality".into(), passed: worst <= 1e-8, detail: format!("max rel gap {worst:.2e}") });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::new(ExperimentKind::MuSweep);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let text = "kind = \"mu_sweep\"\n[darom]\nmuu = 3.0\n";
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config(m)) => assert!(m.contains("muu"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("kind = \"mu_sweep\"\nextra = 1\n").is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "kind = \"rate_table\"\n[dns]\nn = 64\n[darom]\nstepper = \"be\"\nmu_list = [0.0, 5.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.dns.n, 64);
        assert_eq!(cfg.dns.nu, DnsSection::default().nu);
        assert_eq!(cfg.darom.stepper, RomStepper::BackwardEuler);
        assert_eq!(cfg.darom.mu_list, vec![0.0, 5.0]);
    }

    #[test]
    fn validation_errors() {
        let bad = [
            "kind = \"mu_sweep\"\n[darom]\nmu_list = []\n",
            "kind = \"mu_sweep\"\n[darom]\nr_list = [4, 4]\n",
            "kind = \"mu_sweep\"\n[darom]\nmu = -1.0\n",
            "kind = \"mu_sweep\"\n[darom.adaptive]\nenergy_band = 0.0\n",
            "kind = \"mu_sweep\"\n[dns]\nn = 63\n",
            "kind = \"mu_sweep\"\n[dns]\nstart_file = \"/nonexistent/start.snap\"\n",
            "kind = \"mu_sweep\"\n[pod]\nfractions = [1.5]\n",
            "kind = \"unknown\"\n",
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn rates_from_measurements() {
        let rows = RateTable::from_measurements(
            &[4, 6, 8, 10],
            &[100.0, 10.0, 1.0, 0.5],
            &[Ok((1.0, 2.0)), Ok((0.1, 0.2)), Ok((0.1, 0.02)), Err("blow-up".into())],
        );
        assert_eq!(rows[0].rate, None);
        assert!((rows[1].rate.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rows[2].rate, Some(0.0));
        assert!(rows[2].flagged);
        assert_eq!(rows[3].rate, None);
        assert!(rows[3].failure.is_some());
        assert!((rows[2].mean_rate.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rows[3].mean_rate, None);
        let t = RateTable { rows, mu: 1.0, t_end: 1.0, provenance: Provenance::default() };
        assert!(t.to_csv().contains("failed: blow-up"));
        assert_eq!(t.mean_rate(), Some(0.5));
    }

    #[test]
    fn decay_fit_recovers_exponential() {
        // plateau well below the transient so the tail barely bends the fit
        let times: Vec<f64> = (0..300).map(|k| k as f64 * 0.01).collect();
        let errors: Vec<f64> = times.iter().map(|t| 5.0 * (-20.0 * t).exp() + 1e-6).collect();
        let fit = fit_exponential_decay(&times, &errors).unwrap();
        assert!(fit.r_squared > 0.99);
        assert!((fit.rate - 20.0).abs() < 1.0, "{fit:?}");
        assert!((fit.plateau - 1e-6).abs() < 1e-12);
        let flat = vec![1.0; 50];
        assert!(fit_exponential_decay(&times[..50], &flat).is_none());
    }

    #[test]
    fn verify_suite_passes() {
        let checks = verify().unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
