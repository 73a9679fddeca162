//! Nudged POD-Galerkin reduced order model.
//!
//! With `u_r = sum_j a_j phi_j` and an orthonormal basis the backward Euler
//! step reads
//!
//! ```text
//! (a - a^n)/dt + N(a) a + nu S a + mu G a = f + mu o(t^{n+1})
//! ```
//!
//! where `N(a)_ik = sum_j a_j T_jki`, `T_ijk = b*(phi_i, phi_j, phi_k)`,
//! `S_ij = (grad phi_j, grad phi_i)`, `G_ij = (I_H phi_j, I_H phi_i)`,
//! `f_i = (f, phi_i)` and `o_i = (I_H u, I_H phi_i)`. BDF2 replaces the
//! time difference by `(3a - 4a^n + a^{n-1}) / (2 dt)`. The implicit
//! convection is resolved by Picard iteration on the convecting field.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dns::Forcing;
use crate::error::{Error, Result};
use crate::field::{inner_l2, Resolved, VelocityField};
use crate::observation::{cell_inner, CellMeans, CoarseMesh, ObservationStream};
use crate::pod::PodBasis;

/// Reduced operators of dimension `r`.
#[derive(Clone, Debug)]
pub struct RomOperators {
    pub r: usize,
    pub nu: f64,
    /// `S`, symmetric positive semi-definite.
    pub stiffness: DMatrix<f64>,
    /// `T_ijk` at `i * r * r + j * r + k`.
    pub trilinear: Vec<f64>,
    /// `G`, symmetric positive semi-definite.
    pub nudging: DMatrix<f64>,
    pub forcing: DVector<f64>,
    /// Cell means of each mode (`I_H phi_i`).
    pub mode_means: Vec<CellMeans>,
    /// Quadrature area of each coarse cell.
    pub cell_weights: Vec<f64>,
    /// Coarse cell width `H`.
    pub coarse_h: f64,
    pub provenance: String,
}

/// Builds the reduced operators from the first `r` modes.
pub fn assemble(
    basis: &PodBasis,
    r: usize,
    mesh: &CoarseMesh,
    nu: f64,
    forcing: &Forcing,
) -> Result<RomOperators> {
    if r == 0 || r > basis.dim() {
        return Err(Error::Range(format!("rank {r} outside 1..={}", basis.dim())));
    }
    mesh.grid()
        .check_same(&basis.grid)
        .map_err(|_| Error::Config("coarse mesh is not nested in the basis grid".into()))?;
    let modes = &basis.modes[..r];
    let stiffness = basis.stiffness_matrix(r)?;

    let resolved: Vec<Resolved> = modes.par_iter().map(Resolved::new).collect();
    // b[i][j][k] = b(phi_i, phi_j, phi_k)
    let b: Vec<Vec<f64>> = (0..r * r)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / r, ij % r);
            let p = resolved[i].advect(&resolved[j]);
            resolved.iter().map(|v| v.dot(&p)).collect()
        })
        .collect();
    let mut trilinear = vec![0.0; r * r * r];
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                trilinear[(i * r + j) * r + k] = 0.5 * b[i * r + j][k] - 0.5 * b[i * r + k][j];
            }
        }
    }

    let mode_means = modes.iter().map(|phi| mesh.interpolate(phi)).collect::<Result<Vec<_>>>()?;
    let mut nudging = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..=i {
            let v = mesh.inner(&mode_means[i], &mode_means[j]);
            nudging[(i, j)] = v;
            nudging[(j, i)] = v;
        }
    }

    let f = forcing.field(&basis.grid);
    let forcing_vec = modes.iter().map(|phi| inner_l2(&f, phi)).collect::<Result<Vec<_>>>()?;

    let mut h = Sha256::new();
    h.update(format!("{} r={r} nu={nu:e} H={:e} {forcing:?}", basis.provenance, mesh.h()));
    Ok(RomOperators {
        r,
        nu,
        stiffness,
        trilinear,
        nudging,
        forcing: DVector::from_vec(forcing_vec),
        mode_means,
        cell_weights: mesh.cell_weights(),
        coarse_h: mesh.h(),
        provenance: hex::encode(h.finalize()),
    })
}

impl RomOperators {
    pub fn t(&self, i: usize, j: usize, k: usize) -> f64 {
        self.trilinear[(i * self.r + j) * self.r + k]
    }

    /// Operators of the leading `r` modes.
    pub fn truncate(&self, r: usize) -> Result<RomOperators> {
        if r == 0 || r > self.r {
            return Err(Error::Range(format!("rank {r} outside 1..={}", self.r)));
        }
        let mut trilinear = Vec::with_capacity(r * r * r);
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    trilinear.push(self.t(i, j, k));
                }
            }
        }
        Ok(RomOperators {
            r,
            nu: self.nu,
            stiffness: self.stiffness.view((0, 0), (r, r)).into_owned(),
            trilinear,
            nudging: self.nudging.view((0, 0), (r, r)).into_owned(),
            forcing: self.forcing.rows(0, r).into_owned(),
            mode_means: self.mode_means[..r].to_vec(),
            cell_weights: self.cell_weights.clone(),
            coarse_h: self.coarse_h,
            provenance: format!("{}[..{r}]", self.provenance),
        })
    }

    /// Copy with the convective tensor zeroed (linear Stokes-like ROM).
    pub fn without_convection(&self) -> RomOperators {
        let mut out = self.clone();
        out.trilinear.iter_mut().for_each(|t| *t = 0.0);
        out
    }

    /// `N(a)_ik = sum_j a_j T_jki`, skew-symmetric.
    pub fn convection_matrix(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let r = self.r;
        let mut n = DMatrix::zeros(r, r);
        for j in 0..r {
            let aj = a[j];
            if aj == 0.0 {
                continue;
            }
            let block = &self.trilinear[j * r * r..(j + 1) * r * r];
            for k in 0..r {
                for i in 0..r {
                    n[(i, k)] += aj * block[k * r + i];
                }
            }
        }
        n
    }

    /// `o_i = (I_H u, I_H phi_i)`.
    pub fn observation_vector(&self, obs: &CellMeans) -> DVector<f64> {
        DVector::from_iterator(
            self.r,
            self.mode_means.iter().map(|m| cell_inner(&self.cell_weights, m, obs)),
        )
    }

    /// `||I_H u||^2`.
    pub fn observed_norm_sq(&self, obs: &CellMeans) -> f64 {
        cell_inner(&self.cell_weights, obs, obs)
    }

    /// `DAT = ||I_H u_r||^2 - ||I_H u||^2 + ||I_H (u_r - u)||^2`.
    pub fn dat(&self, a: &DVector<f64>, obs: &CellMeans) -> f64 {
        let ga = &self.nudging * a;
        let model = a.dot(&ga);
        let truth = self.observed_norm_sq(obs);
        let cross = a.dot(&self.observation_vector(obs));
        let misfit = (model - 2.0 * cross + truth).max(0.0);
        model - truth + misfit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RomStepper {
    #[serde(alias = "be")]
    BackwardEuler,
    Bdf2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardSettings {
    /// Tolerance on the update norm, relative to `max(1, ||a||)`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings { tol: 1e-10, max_iters: 25 }
    }
}

/// Feedback controller for the nudging parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveSettings {
    pub check_stride: usize,
    pub mu_step: f64,
    /// Relative energy dead-band.
    pub energy_band: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        AdaptiveSettings { check_stride: 10, mu_step: 1.0, energy_band: 0.02, mu_min: 0.0, mu_max: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaConfig {
    pub mu0: f64,
    pub dt: f64,
    pub t_end: f64,
    pub stepper: RomStepper,
    pub picard: PicardSettings,
    pub adaptive: Option<AdaptiveSettings>,
}

impl DaConfig {
    pub fn new(mu0: f64, dt: f64, t_end: f64) -> Self {
        DaConfig {
            mu0,
            dt,
            t_end,
            stepper: RomStepper::Bdf2,
            picard: PicardSettings::default(),
            adaptive: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 >= 0.0) {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu0)));
        }
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::Config("dt must be positive and t_end non-negative".into()));
        }
        if let Some(a) = &self.adaptive {
            if !(a.mu_min >= 0.0) || !(a.energy_band > 0.0) || a.check_stride == 0 || !(a.mu_max >= a.mu_min) {
                return Err(Error::Config(format!("invalid adaptive settings {a:?}")));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Mutable state of one run.
#[derive(Clone, Debug)]
pub struct DaRunState {
    pub a: DVector<f64>,
    pub a_prev: Option<DVector<f64>>,
    pub mu: f64,
    pub step: usize,
    pub last_dat: f64,
    pub last_adjust_step: Option<usize>,
}

impl DaRunState {
    pub fn new(a0: DVector<f64>, mu: f64) -> Self {
        DaRunState { a: a0, a_prev: None, mu, step: 0, last_dat: 0.0, last_adjust_step: None }
    }

    pub fn energy(&self) -> f64 {
        0.5 * self.a.norm_squared()
    }
}

/// Nudging data for one step.
struct Nudge<'a> {
    mu: f64,
    obs: &'a CellMeans,
}

fn picard_solve(
    ops: &RomOperators,
    time_coeff: f64,
    history: &DVector<f64>,
    guess: DVector<f64>,
    nudge: Option<Nudge<'_>>,
    settings: &PicardSettings,
) -> Result<DVector<f64>> {
    let r = ops.r;
    let mut base = &ops.stiffness * ops.nu;
    for i in 0..r {
        base[(i, i)] += time_coeff;
    }
    let mut rhs = history + &ops.forcing;
    if let Some(n) = &nudge {
        base += &ops.nudging * n.mu;
        rhs += ops.observation_vector(n.obs) * n.mu;
    }
    let mut a = guess;
    let mut history_norms = Vec::with_capacity(settings.max_iters);
    for _ in 0..settings.max_iters {
        let m = &base + ops.convection_matrix(&a);
        let next = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Stagnation { iterations: history_norms.len(), last: f64::NAN, history: history_norms.clone() })?;
        let delta = (&next - &a).norm();
        history_norms.push(delta);
        if !delta.is_finite() {
            break;
        }
        let done = delta <= settings.tol * next.norm().max(1.0);
        a = next;
        if done {
            return Ok(a);
        }
    }
    Err(Error::Stagnation {
        iterations: history_norms.len(),
        last: history_norms.last().copied().unwrap_or(f64::NAN),
        history: history_norms,
    })
}

fn advance(
    ops: &RomOperators,
    state: &DaRunState,
    dt: f64,
    bdf2: bool,
    nudge: Option<Nudge<'_>>,
    picard: &PicardSettings,
) -> Result<DaRunState> {
    let (coeff, history, guess) = match (&state.a_prev, bdf2) {
        (Some(prev), true) => (
            1.5 / dt,
            (&state.a * 4.0 - prev) / (2.0 * dt),
            &state.a * 2.0 - prev,
        ),
        _ => (1.0 / dt, &state.a / dt, state.a.clone()),
    };
    let a = picard_solve(ops, coeff, &history, guess, nudge, picard)?;
    Ok(DaRunState {
        a,
        a_prev: Some(state.a.clone()),
        mu: state.mu,
        step: state.step + 1,
        last_dat: state.last_dat,
        last_adjust_step: state.last_adjust_step,
    })
}

/// Backward Euler step nudged toward `obs`, the observation at the new time.
pub fn step_backward_euler(
    ops: &RomOperators,
    state: &DaRunState,
    obs: &CellMeans,
    dt: f64,
    picard: &PicardSettings,
) -> Result<DaRunState> {
    advance(ops, state, dt, false, Some(Nudge { mu: state.mu, obs }), picard)
}

/// BDF2 step; falls back to backward Euler when no history level exists.
pub fn step_bdf2(
    ops: &RomOperators,
    state: &DaRunState,
    obs: &CellMeans,
    dt: f64,
    picard: &PicardSettings,
) -> Result<DaRunState> {
    advance(ops, state, dt, true, Some(Nudge { mu: state.mu, obs }), picard)
}

/// Un-nudged Galerkin ROM step.
pub fn step_galerkin(
    ops: &RomOperators,
    state: &DaRunState,
    dt: f64,
    stepper: RomStepper,
    picard: &PicardSettings,
) -> Result<DaRunState> {
    advance(ops, state, dt, stepper == RomStepper::Bdf2, None, picard)
}

/// Dead-band controller: outside the band, push `mu` in the direction that
/// makes the nudging term dissipate (energy too high) or feed (energy too
/// low) given the sign of `dat`, then clamp.
pub fn adaptive_rule(mu: f64, energy_rom: f64, energy_true: f64, dat: f64, s: &AdaptiveSettings) -> f64 {
    let hi = energy_rom > energy_true * (1.0 + s.energy_band);
    let lo = energy_rom < energy_true * (1.0 - s.energy_band);
    let next = if hi {
        if dat > 0.0 {
            mu + s.mu_step
        } else {
            mu - s.mu_step
        }
    } else if lo {
        if dat > 0.0 {
            mu - s.mu_step
        } else {
            mu + s.mu_step
        }
    } else {
        mu
    };
    next.clamp(s.mu_min, s.mu_max)
}

/// New nudging parameter after a check at the state's current time.
pub fn adaptive_update(
    state: &DaRunState,
    ops: &RomOperators,
    obs: &CellMeans,
    true_energy: f64,
    settings: &AdaptiveSettings,
) -> f64 {
    let dat = ops.dat(&state.a, obs);
    adaptive_rule(state.mu, state.energy(), true_energy, dat, settings)
}

/// Truth data for error diagnostics: `(u(t^n), phi_j)` and `||u(t^n)||^2`
/// aligned with an observation stream.
#[derive(Clone, Debug)]
pub struct TruthReference {
    pub coeffs: Vec<Vec<f64>>,
    pub norm_sq: Vec<f64>,
}

impl TruthReference {
    pub fn from_fields(basis: &PodBasis, r: usize, fields: &[VelocityField]) -> Result<Self> {
        let coeffs = fields.par_iter().map(|f| basis.coefficients(r, f)).collect::<Result<Vec<_>>>()?;
        let norm_sq = fields.iter().map(|f| f.norm_l2().powi(2)).collect();
        Ok(TruthReference { coeffs, norm_sq })
    }

    pub fn push(&mut self, basis: &PodBasis, r: usize, field: &VelocityField) -> Result<()> {
        self.coeffs.push(basis.coefficients(r, field)?);
        self.norm_sq.push(field.norm_l2().powi(2));
        Ok(())
    }

    /// `||u(t^n) - sum_j a_j phi_j||`
    pub fn error(&self, n: usize, a: &DVector<f64>) -> f64 {
        let c = &self.coeffs[n];
        let cross: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        (self.norm_sq[n] - 2.0 * cross + a.norm_squared()).max(0.0).sqrt()
    }
}

/// One diagnostics row per time level.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub step: usize,
    pub time: f64,
    pub mu: f64,
    pub energy_rom: f64,
    pub energy_true: f64,
    pub l2_error: Option<f64>,
    pub dat: f64,
}

pub const CSV_HEADER: &str = "step,time,mu,energy_rom,energy_true,l2_error,dat";

#[derive(Clone, Debug)]
pub struct DaRun {
    pub rows: Vec<DiagnosticRow>,
    pub final_state: DaRunState,
    /// `sup_n ||u_r^n||`.
    pub max_norm: f64,
    pub warnings: Vec<String>,
}

impl DaRun {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    /// Hex SHA-256 of the CSV text.
    pub fn csv_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    /// Time average of `|E_rom - E_true|` over steps `1..`.
    pub fn mean_energy_error(&self) -> f64 {
        mean(self.rows.iter().skip(1).map(|r| (r.energy_rom - r.energy_true).abs()))
    }

    /// Time average of `|E_rom - E_true| / E_true` over steps `1..`.
    pub fn mean_relative_energy_error(&self) -> f64 {
        mean(self.rows.iter().skip(1).map(|r| (r.energy_rom - r.energy_true).abs() / r.energy_true))
    }

    pub fn mean_l2_error(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.rows.iter().skip(1).map(|r| r.l2_error).collect();
        v.map(|v| mean(v.into_iter()))
    }

    pub fn final_l2_error(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.l2_error)
    }

    pub fn mu_changes(&self) -> usize {
        self.rows.windows(2).filter(|w| w[0].mu != w[1].mu).count()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn rows_to_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let err = r.l2_error.map(|e| format!("{e:e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{},{:e}",
            r.step, r.time, r.mu, r.energy_rom, r.energy_true, err, r.dat
        );
    }
    out
}

fn check_alignment(cfg: &DaConfig, obs: &ObservationStream, steps: usize) -> Result<()> {
    if obs.len() < steps + 1 {
        return Err(Error::Range(format!(
            "observation stream holds {} entries, the run needs {}",
            obs.len(),
            steps + 1
        )));
    }
    let t0 = obs.times[0];
    for n in 0..=steps {
        let want = t0 + n as f64 * cfg.dt;
        if (obs.times[n] - want).abs() > 1e-6 * cfg.dt {
            return Err(Error::Range(format!(
                "observation {n} at t = {} does not align with step time {want}",
                obs.times[n]
            )));
        }
    }
    Ok(())
}

/// Runs the nudged ROM from `a0` (zero when `None`) over the observation
/// window, recording diagnostics at every time level.
pub fn run(
    ops: &RomOperators,
    cfg: &DaConfig,
    obs: &ObservationStream,
    truth: Option<&TruthReference>,
    a0: Option<DVector<f64>>,
) -> Result<DaRun> {
    run_inner(ops, cfg, obs, truth, a0, true)
}

/// The same time loop without any nudging term (observations are used for
/// diagnostics only).
pub fn run_galerkin(
    ops: &RomOperators,
    cfg: &DaConfig,
    obs: &ObservationStream,
    truth: Option<&TruthReference>,
    a0: Option<DVector<f64>>,
) -> Result<DaRun> {
    run_inner(ops, cfg, obs, truth, a0, false)
}

fn run_inner(
    ops: &RomOperators,
    cfg: &DaConfig,
    obs: &ObservationStream,
    truth: Option<&TruthReference>,
    a0: Option<DVector<f64>>,
    nudged: bool,
) -> Result<DaRun> {
    cfg.validate()?;
    let steps = cfg.steps();
    check_alignment(cfg, obs, steps)?;
    if let Some(t) = truth {
        if t.coeffs.len() < steps + 1 || t.coeffs.iter().any(|c| c.len() < ops.r) {
            return Err(Error::Range("truth reference does not cover the run".into()));
        }
    }
    let mut warnings = Vec::new();
    let h = ops.coarse_h;
    if nudged && cfg.mu0 * h * h >= ops.nu {
        let msg = format!(
            "mu H^2 = {:.3e} >= nu = {:.3e}: outside the guaranteed convergence regime",
            cfg.mu0 * h * h,
            ops.nu
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let a0 = a0.unwrap_or_else(|| DVector::zeros(ops.r));
    if a0.len() != ops.r {
        return Err(Error::Dimension(format!("initial coefficients of length {} for r = {}", a0.len(), ops.r)));
    }
    let mut state = DaRunState::new(a0, if nudged { cfg.mu0 } else { 0.0 });
    let mut rows = Vec::with_capacity(steps + 1);
    let record = |state: &DaRunState, n: usize, dat: f64| DiagnosticRow {
        step: n,
        time: n as f64 * cfg.dt,
        mu: state.mu,
        energy_rom: state.energy(),
        energy_true: obs.true_energy[n],
        l2_error: truth.map(|t| t.error(n, &state.a)),
        dat,
    };
    let dat0 = ops.dat(&state.a, &obs.coarse_values[0]);
    state.last_dat = dat0;
    rows.push(record(&state, 0, dat0));
    let mut max_norm = state.a.norm();

    for n in 1..=steps {
        let bdf2 = cfg.stepper == RomStepper::Bdf2;
        let nudge = nudged.then(|| Nudge { mu: state.mu, obs: &obs.coarse_values[n] });
        state = advance(ops, &state, cfg.dt, bdf2, nudge, &cfg.picard)?;
        if state.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: n, time: n as f64 * cfg.dt });
        }
        max_norm = max_norm.max(state.a.norm());
        let dat = ops.dat(&state.a, &obs.coarse_values[n]);
        state.last_dat = dat;
        rows.push(record(&state, n, dat));
        if let (true, Some(ad)) = (nudged, &cfg.adaptive) {
            if n % ad.check_stride == 0 {
                let next = adaptive_rule(state.mu, state.energy(), obs.true_energy[n], dat, ad);
                if next != state.mu {
                    state.last_adjust_step = Some(n);
                    state.mu = next;
                }
            }
        }
    }
    Ok(DaRun { rows, final_state: state, max_norm, warnings })
}

/// Runs one configuration per nudging parameter, in parallel.
pub fn sweep(
    ops: &RomOperators,
    base: &DaConfig,
    obs: &ObservationStream,
    truth: Option<&TruthReference>,
    mus: &[f64],
) -> Vec<Result<DaRun>> {
    mus.par_iter()
        .map(|&mu| {
            let mut cfg = base.clone();
            cfg.mu0 = mu;
            run(ops, &cfg, obs, truth, None)
        })
        .collect()
}
