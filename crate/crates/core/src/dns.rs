//! Pseudo-spectral reference solver for the periodic incompressible
//! Navier-Stokes equations.
//!
//! The state is kept in Fourier space, dealiased and divergence free. The
//! viscous term is implicit (diagonal), the skew-symmetric advection term is
//! explicit and evaluated on the extrapolated field `2 u^n - u^{n-1}`; the
//! first step is backward Euler.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Grid, Spectrum, VelocityField};

/// Body force.
#[derive(Clone, Debug, PartialEq)]
pub enum Forcing {
    None,
    /// `f = (amplitude * sin(wavenumber * 2 pi y / ly), 0)`
    Kolmogorov { amplitude: f64, wavenumber: u32 },
}

impl Forcing {
    pub fn field(&self, grid: &Arc<Grid>) -> VelocityField {
        match *self {
            Forcing::None => VelocityField::zeros(grid),
            Forcing::Kolmogorov { amplitude, wavenumber } => {
                let k = 2.0 * std::f64::consts::PI * wavenumber as f64 / grid.ly();
                VelocityField::from_fn(grid, |_, y| (amplitude * (k * y).sin(), 0.0))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum InitialCondition {
    /// `u = (sin x cos y, -cos x sin y)` scaled to the box.
    TaylorGreen,
    /// Random divergence-free field, wavenumbers up to 4, unit rms speed.
    RandomSeeded(u64),
    /// Last field stored in a snapshot file.
    FromFile(PathBuf),
    Field(VelocityField),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeScheme {
    BackwardEuler,
    Bdf2,
}

#[derive(Clone, Debug)]
pub struct DnsConfig {
    pub grid: Arc<Grid>,
    pub nu: f64,
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub forcing: Forcing,
    pub initial_condition: InitialCondition,
    /// Record every `snapshot_stride`-th step.
    pub snapshot_stride: usize,
    /// Snapshots earlier than this are discarded (spin-up).
    pub record_from: f64,
    pub scheme: TimeScheme,
    /// When false only the observer sees the recorded fields.
    pub store_snapshots: bool,
}

impl DnsConfig {
    pub fn new(grid: Arc<Grid>, nu: f64, dt: f64, t_end: f64) -> Self {
        DnsConfig {
            grid,
            nu,
            dt,
            t_start: 0.0,
            t_end,
            forcing: Forcing::None,
            initial_condition: InitialCondition::TaylorGreen,
            snapshot_stride: 1,
            record_from: f64::NEG_INFINITY,
            scheme: TimeScheme::Bdf2,
            store_snapshots: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::Config(format!("viscosity must be positive, got {}", self.nu)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {}", self.dt)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::Config("snapshot stride must be at least 1".into()));
        }
        if !(self.t_end >= self.t_start) {
            return Err(Error::Config("t_end precedes t_start".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt).round() as usize
    }

    /// Hex SHA-256 of everything that determines the trajectory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let g = &self.grid;
        h.update(format!(
            "grid {} {} {:e} {:e} {:e}; nu {:e}; dt {:e}; t {:e}..{:e}; forcing {:?}; stride {}; from {:e}; {:?}",
            g.nx(),
            g.ny(),
            g.lx(),
            g.ly(),
            g.dealias_fraction(),
            self.nu,
            self.dt,
            self.t_start,
            self.t_end,
            self.forcing,
            self.snapshot_stride,
            self.record_from,
            self.scheme
        ));
        match &self.initial_condition {
            InitialCondition::Field(f) => {
                h.update(b"field");
                for v in f.u1.iter().chain(&f.u2) {
                    h.update(v.to_le_bytes());
                }
            }
            other => h.update(format!("{other:?}")),
        }
        hex::encode(h.finalize())
    }
}

/// Time-ordered truth fields.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub grid: Arc<Grid>,
    pub times: Vec<f64>,
    pub fields: Vec<VelocityField>,
    /// Hash of the configuration that produced the set.
    pub provenance: String,
}

impl SnapshotSet {
    pub fn new(grid: Arc<Grid>, times: Vec<f64>, fields: Vec<VelocityField>, provenance: String) -> Result<Self> {
        if times.len() != fields.len() {
            return Err(Error::Dimension(format!("{} times for {} fields", times.len(), fields.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("snapshot times must be strictly increasing".into()));
        }
        for f in &fields {
            grid.check_same(f.grid())?;
        }
        Ok(SnapshotSet { grid, times, fields, provenance })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.fields.iter().map(|f| f.energy()).collect()
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SnapshotSet {
        SnapshotSet {
            grid: self.grid.clone(),
            times: self.times[start..end].to_vec(),
            fields: self.fields[start..end].to_vec(),
            provenance: format!("{}[{start}..{end}]", self.provenance),
        }
    }

    /// Hex SHA-256 over the times and raw field bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.times {
            h.update(t.to_le_bytes());
        }
        for f in &self.fields {
            for v in f.u1.iter().chain(&f.u2) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct DnsOutput {
    pub snapshots: SnapshotSet,
    pub final_field: VelocityField,
    pub final_time: f64,
    /// `(t, 0.5 ||u||^2)` after every step, starting with the initial state.
    pub energy_history: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

pub fn initial_field(config: &DnsConfig) -> Result<VelocityField> {
    let g = &config.grid;
    let f = match &config.initial_condition {
        InitialCondition::TaylorGreen => {
            let (ax, ay) = (2.0 * std::f64::consts::PI / g.lx(), 2.0 * std::f64::consts::PI / g.ly());
            VelocityField::from_fn(g, |x, y| {
                ((ax * x).sin() * (ay * y).cos(), -(ax / ay) * (ax * x).cos() * (ay * y).sin())
            })
        }
        InitialCondition::RandomSeeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let raw = VelocityField::random_band_limited(g, 4, &mut rng);
            let p = crate::field::leray_project(&raw);
            let rms = (p.norm_l2() / (g.lx() * g.ly()).sqrt()).max(f64::MIN_POSITIVE);
            p.scaled(1.0 / rms)
        }
        InitialCondition::FromFile(path) => {
            let set = crate::io::read_snapshots(path)?;
            let last = set
                .fields
                .last()
                .ok_or_else(|| Error::Format(format!("{} holds no fields", path.display())))?;
            if last.grid().nx() != g.nx() || last.grid().ny() != g.ny() {
                return Err(Error::Dimension(format!(
                    "initial field is {}x{}, grid is {}x{}",
                    last.grid().nx(),
                    last.grid().ny(),
                    g.nx(),
                    g.ny()
                )));
            }
            VelocityField::from_components(g, last.u1.clone(), last.u2.clone())?
        }
        InitialCondition::Field(f) => {
            if f.grid().nx() != g.nx() || f.grid().ny() != g.ny() {
                return Err(Error::Dimension("initial field does not match the grid".into()));
            }
            VelocityField::from_components(g, f.u1.clone(), f.u2.clone())?
        }
    };
    Ok(f)
}

struct Stepper {
    grid: Arc<Grid>,
    nu: f64,
    dt: f64,
    forcing: Spectrum,
}

impl Stepper {
    /// `-P[ (u.grad u + div(u u)) / 2 ] + P f`, dealiased.
    fn explicit_rhs(&self, s: &Spectrum) -> Spectrum {
        let g = &self.grid;
        let n = g.len();
        let u = s.to_field();
        let grad = s.gradient();
        let mut adv = [vec![0.0; n], vec![0.0; n]];
        for (a, adv_a) in adv.iter_mut().enumerate() {
            for k in 0..n {
                adv_a[k] = u.u1[k] * grad[a][0][k] + u.u2[k] * grad[a][1][k];
            }
        }
        let uu: Vec<f64> = u.u1.iter().map(|a| a * a).collect();
        let uv: Vec<f64> = u.u1.iter().zip(&u.u2).map(|(a, b)| a * b).collect();
        let vv: Vec<f64> = u.u2.iter().map(|b| b * b).collect();
        let (uu, uv, vv) = (g.forward(&uu), g.forward(&uv), g.forward(&vv));
        let (a1, a2) = (g.forward(&adv[0]), g.forward(&adv[1]));
        let mut out = Spectrum::zeros(g);
        for i in 0..g.nx() {
            let ikx = Complex64::new(0.0, g.kx(i));
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                if !g.resolved(i, j) {
                    continue;
                }
                let iky = Complex64::new(0.0, g.ky(j));
                let div1 = ikx * uu[idx] + iky * uv[idx];
                let div2 = ikx * uv[idx] + iky * vv[idx];
                out.c1[idx] = self.forcing.c1[idx] - 0.5 * (a1[idx] + div1);
                out.c2[idx] = self.forcing.c2[idx] - 0.5 * (a2[idx] + div2);
            }
        }
        out.leray();
        out
    }

    fn backward_euler(&self, un: &Spectrum) -> Spectrum {
        let rhs = self.explicit_rhs(un);
        let g = &self.grid;
        let mut out = Spectrum::zeros(g);
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                let denom = 1.0 + self.dt * self.nu * g.k2(i, j);
                out.c1[idx] = (un.c1[idx] + self.dt * rhs.c1[idx]) / denom;
                out.c2[idx] = (un.c2[idx] + self.dt * rhs.c2[idx]) / denom;
            }
        }
        out
    }

    fn bdf2(&self, un: &Spectrum, unm1: &Spectrum) -> Spectrum {
        let g = &self.grid;
        let mut star = Spectrum::zeros(g);
        for k in 0..g.len() {
            star.c1[k] = 2.0 * un.c1[k] - unm1.c1[k];
            star.c2[k] = 2.0 * un.c2[k] - unm1.c2[k];
        }
        let rhs = self.explicit_rhs(&star);
        let mut out = Spectrum::zeros(g);
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                let denom = 3.0 + 2.0 * self.dt * self.nu * g.k2(i, j);
                out.c1[idx] = (4.0 * un.c1[idx] - unm1.c1[idx] + 2.0 * self.dt * rhs.c1[idx]) / denom;
                out.c2[idx] = (4.0 * un.c2[idx] - unm1.c2[idx] + 2.0 * self.dt * rhs.c2[idx]) / denom;
            }
        }
        out
    }
}

fn spectral_energy(s: &Spectrum) -> f64 {
    let g = &s.grid;
    let sum: f64 = s.c1.iter().chain(&s.c2).map(|c| c.norm_sqr()).sum();
    0.5 * g.weight() * sum / g.len() as f64
}

/// Runs the reference solver, recording snapshots.
pub fn dns_run(config: &DnsConfig) -> Result<DnsOutput> {
    dns_run_with(config, |_, _| {})
}

/// As [`dns_run`], additionally handing every recorded field to `observer`.
pub fn dns_run_with(config: &DnsConfig, mut observer: impl FnMut(f64, &VelocityField)) -> Result<DnsOutput> {
    config.validate()?;
    let g = config.grid.clone();
    let u0 = initial_field(config)?;
    let mut s = Spectrum::of(&u0);
    s.dealias();
    s.leray();

    let mut forcing = Spectrum::of(&config.forcing.field(&g));
    forcing.dealias();
    forcing.leray();
    let stepper = Stepper { grid: g.clone(), nu: config.nu, dt: config.dt, forcing };

    let mut warnings = Vec::new();
    let mut cfl_warned = false;
    let mut check_cfl = |field: &VelocityField, t: f64, warnings: &mut Vec<String>| {
        let speed = field.max_speed();
        let limit = g.hx().min(g.hy()) / (4.0 * speed);
        if !cfl_warned && speed > 0.0 && config.dt > limit {
            let msg = format!("dt = {} exceeds advisory CFL limit {limit:.3e} at t = {t}", config.dt);
            log::warn!("{msg}");
            warnings.push(msg);
            cfl_warned = true;
        }
    };

    let steps = config.steps();
    let mut times = Vec::new();
    let mut fields = Vec::new();
    let mut energy_history = Vec::with_capacity(steps + 1);
    let mut record = |n: usize, s: &Spectrum, warnings: &mut Vec<String>| -> VelocityField {
        let t = config.t_start + n as f64 * config.dt;
        let field = s.to_field();
        if n % config.snapshot_stride == 0 && t >= config.record_from - 1e-9 * config.dt {
            check_cfl(&field, t, warnings);
            observer(t, &field);
            if config.store_snapshots {
                times.push(t);
                fields.push(field.clone());
            }
        }
        field
    };

    energy_history.push((config.t_start, spectral_energy(&s)));
    let mut last = record(0, &s, &mut warnings);
    let mut prev: Option<Spectrum> = None;
    for n in 1..=steps {
        let next = match (config.scheme, &prev) {
            (TimeScheme::Bdf2, Some(p)) => stepper.bdf2(&s, p),
            _ => stepper.backward_euler(&s),
        };
        prev = Some(std::mem::replace(&mut s, next));
        let t = config.t_start + n as f64 * config.dt;
        let e = spectral_energy(&s);
        if !e.is_finite() {
            return Err(Error::BlowUp { step: n, time: t });
        }
        energy_history.push((t, e));
        let needs_field = n == steps
            || (n % config.snapshot_stride == 0 && t >= config.record_from - 1e-9 * config.dt);
        if needs_field {
            last = record(n, &s, &mut warnings);
        }
    }
    let final_time = config.t_start + steps as f64 * config.dt;
    let snapshots = SnapshotSet::new(g.clone(), times, fields, config.hash())?;
    Ok(DnsOutput { snapshots, final_field: last, final_time, energy_history, warnings })
}

/// Outcome of a time-step refinement study.
#[derive(Clone, Debug)]
pub struct OrderCheck {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln(error)` against `ln(dt)`.
    pub rate: f64,
    /// Set when the errors do not decrease monotonically under refinement.
    pub non_monotone: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Time-step refinement against the analytic Taylor-Green energy decay
/// `E(t) = E(0) exp(-2 nu |k|^2 t)`. The step is halved `refinements - 1`
/// times starting from `config.dt`.
pub fn temporal_order_check(config: &DnsConfig, refinements: usize) -> Result<OrderCheck> {
    if refinements < 3 {
        return Err(Error::Precondition(format!("need at least 3 refinements, got {refinements}")));
    }
    if config.forcing != Forcing::None || !matches!(config.initial_condition, InitialCondition::TaylorGreen) {
        return Err(Error::Precondition("order check needs the unforced Taylor-Green setup".into()));
    }
    let g = &config.grid;
    let k2 = (2.0 * std::f64::consts::PI / g.lx()).powi(2) + (2.0 * std::f64::consts::PI / g.ly()).powi(2);
    let duration = config.t_end - config.t_start;
    let mut dts = Vec::new();
    let mut errors = Vec::new();
    for level in 0..refinements {
        let mut c = config.clone();
        c.dt = config.dt / 2f64.powi(level as i32);
        c.snapshot_stride = usize::MAX;
        c.store_snapshots = false;
        let out = dns_run(&c)?;
        let e0 = out.energy_history[0].1;
        let exact = e0 * (-2.0 * config.nu * k2 * duration).exp();
        let numeric = out.energy_history.last().map(|p| p.1).unwrap_or(e0);
        dts.push(c.dt);
        errors.push((numeric - exact).abs());
    }
    let non_monotone = errors.windows(2).any(|w| !(w[1] < w[0]));
    if non_monotone {
        log::warn!("non-monotone refinement errors: {errors:?}");
    }
    let rate = loglog_slope(&dts, &errors);
    Ok(OrderCheck { dts, errors, rate, non_monotone })
}

/// Advances until the energy signal repeats from period to period within
/// `rel_tol`, checking every `chunk` time units up to `max_time`.
/// Returns the final field, its time and the detected period.
pub fn spin_up(
    config: &DnsConfig,
    chunk: f64,
    max_time: f64,
    rel_tol: f64,
) -> Result<(VelocityField, f64, Option<f64>)> {
    let mut c = config.clone();
    c.store_snapshots = false;
    c.snapshot_stride = usize::MAX;
    let mut history: Vec<f64> = Vec::new();
    let mut t = config.t_start;
    let mut field = initial_field(config)?;
    while t < config.t_start + max_time {
        c.t_start = t;
        c.t_end = t + chunk;
        c.initial_condition = InitialCondition::Field(field);
        let out = dns_run(&c)?;
        history.extend(out.energy_history.iter().skip(1).map(|p| p.1));
        field = out.final_field;
        t = out.final_time;
        let tail = &history[history.len().saturating_sub((2.0 * chunk / config.dt) as usize)..];
        if let Some(p) = crate::signal::is_statistically_periodic(tail, rel_tol) {
            return Ok((field, t, Some(p * config.dt)));
        }
    }
    Ok((field, t, None))
}
