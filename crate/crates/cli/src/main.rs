use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nudgerom_core::experiment::{
    adaptive_compare, hash_text, inaccurate_basis_study, mu_sweep_report, rate_table, verify, ExperimentConfig,
    ExperimentKind, Provenance, SweepReport, Truth,
};
use nudgerom_core::plot::{emit_plots, PlotKind};
use nudgerom_core::pod::{build_pod_with, windowed_snapshots, PodOptions};
use nudgerom_core::rom::{self, AdaptiveSettings, DaRun, RomStepper, TruthReference};
use nudgerom_core::{
    build_observation_stream, dns_run, io, CoarseMesh, DnsConfig, Error, Forcing, Grid, InitialCondition,
    ObservationStream, PodBasis, SnapshotSet,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "nudgerom", version, about = "Nudged POD-Galerkin reduced order models of 2D periodic flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the reference solver and store snapshots.
    Dns(DnsArgs),
    /// Coarse cell averages of stored snapshots.
    Observe(ObserveArgs),
    /// POD basis of stored snapshots.
    Pod(PodArgs),
    /// One nudged ROM run.
    Darom(DaromArgs),
    /// Nudged ROM runs over a list of constant mu.
    Sweep(SweepArgs),
    /// Final error against eigentail over the configured ranks.
    RateTable(RateTableArgs),
    /// Run the experiment named in a config file.
    Report(ReportArgs),
    /// Quick numerical self-checks.
    Verify,
}

#[derive(Args)]
struct DnsArgs {
    /// Experiment config; its dns section supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write observations at every solver step of the window.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Plain run to this time instead of the spin-up and window pipeline.
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// `taylor_green`, `random:<seed>` or `file:<path>` (plain runs).
    #[arg(long, default_value = "random:7")]
    ic: String,
    /// `kolmogorov:<amplitude>:<wavenumber>` or `none`.
    #[arg(long)]
    forcing: Option<String>,
    #[arg(long)]
    snapshot_stride: Option<usize>,
}

#[derive(Args)]
struct ObserveArgs {
    #[arg(long)]
    snapshots: PathBuf,
    /// Coarse cells per direction, `H = L / cells`.
    #[arg(long, default_value_t = 20)]
    cells: usize,
    /// Observe every `stride`-th snapshot.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PodArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long, default_value_t = 1e-12)]
    rank_tol: f64,
    /// Keep only this fraction of one oscillation period.
    #[arg(long)]
    fraction: Option<f64>,
    /// Period in time units; detected from the energies when absent.
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Physics {
    /// Experiment config supplying viscosity and forcing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
    /// `kolmogorov:<amplitude>:<wavenumber>` or `none`.
    #[arg(long)]
    forcing: Option<String>,
}

#[derive(Args)]
struct RomArgs {
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    r: usize,
    #[arg(long, value_enum, default_value_t = Stepper::Bdf2)]
    stepper: Stepper,
    /// Defaults to the observation spacing.
    #[arg(long)]
    dt: Option<f64>,
    /// Defaults to the end of the observation record.
    #[arg(long)]
    t_end: Option<f64>,
    /// Snapshots of the truth at every DA step; adds the L2 error column.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    picard_tol: f64,
    #[arg(long, default_value_t = 25)]
    picard_max_iters: usize,
    #[command(flatten)]
    physics: Physics,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stepper {
    Be,
    Bdf2,
}

#[derive(Args)]
struct DaromArgs {
    #[command(flatten)]
    rom: RomArgs,
    /// A number or `adaptive`.
    #[arg(long)]
    mu: String,
    /// Starting mu of an adaptive run.
    #[arg(long, default_value_t = 100.0)]
    mu0: f64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for a plot script and SVG of the run.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    rom: RomArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    mu_list: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RateTableArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|_| match cli.command {
        Command::Dns(a) => cmd_dns(a),
        Command::Observe(a) => cmd_observe(a),
        Command::Pod(a) => cmd_pod(a),
        Command::Darom(a) => cmd_darom(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::RateTable(a) => cmd_rate_table(a),
        Command::Report(a) => cmd_report(a),
        Command::Verify => cmd_verify(),
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Stdout writes that tolerate a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("NUDGEROM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("NUDGEROM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(path: Option<&Path>, kind: ExperimentKind) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::new(kind)),
    }
}

fn parse_forcing(s: &str) -> anyhow::Result<Forcing> {
    let bad = || Error::Config(format!("forcing must be `none` or `kolmogorov:<amplitude>:<wavenumber>`, got {s:?}"));
    if s == "none" {
        return Ok(Forcing::None);
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["kolmogorov", a, k] => Ok(Forcing::Kolmogorov {
            amplitude: a.parse().map_err(|_| bad())?,
            wavenumber: k.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad().into()),
    }
}

fn parse_ic(s: &str) -> anyhow::Result<InitialCondition> {
    if s == "taylor_green" {
        return Ok(InitialCondition::TaylorGreen);
    }
    if let Some(seed) = s.strip_prefix("random:") {
        let seed = seed.parse().map_err(|_| Error::Config(format!("bad seed in {s:?}")))?;
        return Ok(InitialCondition::RandomSeeded(seed));
    }
    if let Some(p) = s.strip_prefix("file:") {
        return Ok(InitialCondition::FromFile(PathBuf::from(p)));
    }
    Err(Error::Config(format!("initial condition must be taylor_green, random:<seed> or file:<path>, got {s:?}")).into())
}

fn cmd_dns(a: DnsArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(a.config.as_deref(), ExperimentKind::MuSweep)?;
    if let Some(n) = a.n {
        cfg.dns.n = n;
    }
    if let Some(nu) = a.nu {
        cfg.dns.nu = nu;
    }
    if let Some(dt) = a.dt {
        cfg.dns.dt = dt;
    }
    if let Some(s) = a.snapshot_stride {
        cfg.dns.snapshot_stride = s;
    }
    let forcing = match &a.forcing {
        Some(f) => parse_forcing(f)?,
        None => cfg.forcing(),
    };

    if let Some(t_end) = a.t_end {
        if a.obs.is_some() {
            bail!(Error::Config("--obs needs the spin-up pipeline; drop --t-end".into()));
        }
        let d = &cfg.dns;
        let grid = Grid::new(d.n, d.n, d.length, d.length)?;
        let mut c = DnsConfig::new(grid, d.nu, d.dt, t_end);
        c.forcing = forcing;
        c.initial_condition = parse_ic(&a.ic)?;
        c.snapshot_stride = d.snapshot_stride;
        c.validate()?;
        let out = dns_run(&c)?;
        io::write_snapshots(&a.out, &out.snapshots)?;
        outln!("{} snapshots to t = {:.4}, final energy {:.6e}", out.snapshots.len(), out.final_time, out.final_field.energy());
        return Ok(0);
    }

    if a.forcing.is_some() {
        bail!(Error::Config("the spin-up pipeline takes its forcing from the config".into()));
    }
    let truth = Truth::generate(&cfg)?;
    io::write_snapshots(&a.out, &truth.snapshots)?;
    if let Some(p) = &a.obs {
        io::write_observations(p, &truth.observations)?;
    }
    outln!(
        "period {:.4}, window {:.4}, {} snapshots, {} observations",
        truth.period,
        truth.window,
        truth.snapshots.len(),
        truth.observations.len()
    );
    Ok(0)
}

fn cmd_observe(a: ObserveArgs) -> anyhow::Result<u8> {
    if a.stride == 0 {
        bail!(Error::Config("--stride must be at least 1".into()));
    }
    let snaps = io::read_snapshots(&a.snapshots)?;
    let mesh = CoarseMesh::with_cells(&snaps.grid, a.cells)?;
    let times: Vec<f64> = snaps.times.iter().step_by(a.stride).copied().collect();
    let mut obs = build_observation_stream(&snaps, &mesh, &times)?;
    if a.noise_std > 0.0 {
        obs = obs.with_noise(a.noise_std, a.noise_seed)?;
    }
    io::write_observations(&a.out, &obs)?;
    outln!("{} observations on {}x{} cells, H = {:.6}", obs.len(), mesh.cells().0, mesh.cells().1, mesh.h());
    Ok(0)
}

fn cmd_pod(a: PodArgs) -> anyhow::Result<u8> {
    let mut snaps = io::read_snapshots(&a.snapshots)?;
    if let Some(f) = a.fraction {
        snaps = windowed_snapshots(&snaps, f, a.period)?;
    }
    let basis = build_pod_with(&snaps, &PodOptions { rank_tol: a.rank_tol, ..PodOptions::default() })?;
    io::write_basis(&a.out, &basis)?;
    outln!("{} modes from {} snapshots", basis.dim(), snaps.len());
    for (j, l) in basis.eigenvalues.iter().enumerate().take(20) {
        outln!("{:3} {:.6e}", j + 1, l);
    }
    Ok(0)
}

/// Operators, observations and optional truth reference for ROM runs.
struct RomSetup {
    basis: PodBasis,
    ops: rom::RomOperators,
    obs: ObservationStream,
    truth: Option<TruthReference>,
    dt: f64,
    t_end: f64,
    stepper: RomStepper,
    picard: rom::PicardSettings,
    provenance: Provenance,
}

fn setup_rom(a: &RomArgs) -> anyhow::Result<RomSetup> {
    let cfg = load_config(a.physics.config.as_deref(), ExperimentKind::MuSweep)?;
    let nu = a.physics.nu.unwrap_or(cfg.dns.nu);
    let forcing = match &a.physics.forcing {
        Some(f) => parse_forcing(f)?,
        None => cfg.forcing(),
    };
    let basis = io::read_basis(&a.basis).with_context(|| format!("reading {}", a.basis.display()))?;
    let obs = io::read_observations(&a.obs).with_context(|| format!("reading {}", a.obs.display()))?;
    if obs.len() < 2 {
        bail!(Error::Config("observation file holds fewer than 2 entries".into()));
    }
    let dt = a.dt.unwrap_or(obs.times[1] - obs.times[0]);
    let t_end = a.t_end.unwrap_or(obs.times[obs.len() - 1] - obs.times[0]);
    let ops = rom::assemble(&basis, a.r, &obs.mesh, nu, &forcing)?;
    let truth = match &a.truth {
        Some(p) => Some(reference_from_snapshots(&basis, a.r, &io::read_snapshots(p)?, &obs, dt, t_end)?),
        None => None,
    };
    let provenance = Provenance::default()
        .with("basis", basis.provenance.clone())
        .with("observations", obs.provenance.clone())
        .with("operators", ops.provenance.clone())
        .with("r", a.r.to_string())
        .with("nu", nu.to_string())
        .with("dt", dt.to_string());
    Ok(RomSetup {
        basis,
        ops,
        obs,
        truth,
        dt,
        t_end,
        stepper: match a.stepper {
            Stepper::Be => RomStepper::BackwardEuler,
            Stepper::Bdf2 => RomStepper::Bdf2,
        },
        picard: rom::PicardSettings { tol: a.picard_tol, max_iters: a.picard_max_iters },
        provenance,
    })
}

/// Truth coefficients at each DA step, which must all be snapshot times.
fn reference_from_snapshots(
    basis: &PodBasis,
    r: usize,
    snaps: &SnapshotSet,
    obs: &ObservationStream,
    dt: f64,
    t_end: f64,
) -> anyhow::Result<TruthReference> {
    let steps = (t_end / dt).round() as usize;
    let t0 = obs.times[0];
    let tol = 1e-6 * dt;
    let mut fields = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let t = t0 + n as f64 * dt;
        let k = snaps
            .times
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Config(format!("truth snapshots do not include the DA time {t}")))?;
        fields.push(snaps.fields[k].clone());
    }
    Ok(TruthReference::from_fields(basis, r, &fields)?)
}

fn run_one(s: &RomSetup, mu: f64, adaptive: Option<AdaptiveSettings>) -> nudgerom_core::Result<DaRun> {
    let mut cfg = rom::DaConfig::new(mu, s.dt, s.t_end);
    cfg.stepper = s.stepper;
    cfg.picard = s.picard.clone();
    cfg.adaptive = adaptive;
    rom::run(&s.ops, &cfg, &s.obs, s.truth.as_ref(), None)
}

fn write_run(path: &Path, prov: &Provenance, run: &DaRun) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, format!("{}{}", prov.header(), run.to_csv()))?;
    Ok(())
}

fn cmd_darom(a: DaromArgs) -> anyhow::Result<u8> {
    let s = setup_rom(&a.rom)?;
    let (mu, adaptive) = match a.mu.as_str() {
        "adaptive" => (a.mu0, Some(AdaptiveSettings::default())),
        v => (v.parse::<f64>().map_err(|_| Error::Config(format!("--mu must be a number or `adaptive`, got {v:?}")))?, None),
    };
    let is_adaptive = adaptive.is_some();
    let run = run_one(&s, mu, adaptive)?;
    let prov = s.provenance.clone().with("mu", a.mu.clone()).with("modes_available", s.basis.dim().to_string());
    write_run(&a.out, &prov, &run)?;
    if let Some(dir) = &a.plot {
        let kind = if is_adaptive { PlotKind::Adaptive } else { PlotKind::Overlay };
        emit_plots(&[a.out.clone()], kind, dir, "darom")?;
    }
    print_summary(&run);
    Ok(0)
}

fn print_summary(run: &DaRun) {
    out!("steps {}, mean energy error {:.6e}", run.rows.len() - 1, run.mean_energy_error());
    if let (Some(m), Some(f)) = (run.mean_l2_error(), run.final_l2_error()) {
        out!(", mean L2 error {m:.6e}, final L2 error {f:.6e}");
    }
    outln!(", mu changes {}", run.mu_changes());
}

fn mu_file(label: &str) -> String {
    format!("{}.csv", label.replace('=', "_"))
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<u8> {
    let s = setup_rom(&a.rom)?;
    fs::create_dir_all(&a.out_dir)?;
    let base = {
        let mut c = rom::DaConfig::new(0.0, s.dt, s.t_end);
        c.stepper = s.stepper;
        c.picard = s.picard.clone();
        c
    };
    let results = rom::sweep(&s.ops, &base, &s.obs, s.truth.as_ref(), &a.mu_list);
    let mut runs = Vec::new();
    for (mu, res) in a.mu_list.iter().zip(results) {
        let run = res.with_context(|| format!("run with mu = {mu}"))?;
        runs.push((format!("mu={mu}"), *mu, run));
    }
    let prov = s.provenance.clone().with(
        "mu_list",
        a.mu_list.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
    );
    let report = SweepReport {
        title: format!("mu sweep, r = {}", a.rom.r),
        rows: runs.iter().map(|(l, mu, r)| nudgerom_core::experiment::SweepRow::of(l.clone(), *mu, r)).collect(),
        runs: runs.into_iter().map(|x| x.2).collect(),
        provenance: prov,
    };
    write_report(&report, &a.out_dir, PlotKind::Overlay)?;
    out!("{}", report.summary_csv());
    Ok(0)
}

fn write_report(report: &SweepReport, dir: &Path, kind: PlotKind) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (row, run) in report.rows.iter().zip(&report.runs) {
        let p = dir.join(mu_file(&row.label));
        write_run(&p, &report.provenance.clone().with("run", row.label.clone()), run)?;
        paths.push(p);
    }
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    emit_plots(&paths, kind, dir, "runs")?;
    Ok(paths)
}

fn cmd_rate_table(a: RateTableArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(a.config.as_deref(), ExperimentKind::RateTable)?;
    cfg.kind = ExperimentKind::RateTable;
    let truth = Truth::generate(&cfg)?;
    let table = rate_table(&truth)?;
    fs::write(&a.out, table.to_csv())?;
    out!("{}", table.to_csv());
    Ok(0)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<u8> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml())?;
    if cfg.kind == ExperimentKind::Verify {
        return cmd_verify_into(Some(&a.out_dir.join("checks.txt")));
    }
    let truth = Truth::generate(&cfg)?;
    match cfg.kind {
        ExperimentKind::RateTable => {
            let table = rate_table(&truth)?;
            fs::write(a.out_dir.join("rate_table.csv"), table.to_csv())?;
            out!("{}", table.to_csv());
        }
        ExperimentKind::MuSweep => {
            let report = mu_sweep_report(&truth)?;
            write_report(&report, &a.out_dir, PlotKind::Overlay)?;
            out!("{}", report.summary_csv());
        }
        ExperimentKind::InaccurateBasis => {
            for (fraction, report) in inaccurate_basis_study(&truth)? {
                let dir = a.out_dir.join(format!("fraction_{fraction}"));
                write_report(&report, &dir, PlotKind::Overlay)?;
                out!("{}", report.summary_csv());
            }
        }
        ExperimentKind::AdaptiveCompare => {
            let report = adaptive_compare(&truth)?;
            let paths = write_report(&report, &a.out_dir, PlotKind::Overlay)?;
            let adaptive: Vec<PathBuf> = paths.into_iter().filter(|p| p.ends_with("adaptive.csv")).collect();
            emit_plots(&adaptive, PlotKind::Adaptive, &a.out_dir, "adaptive")?;
            out!("{}", report.summary_csv());
        }
        ExperimentKind::Verify => unreachable!("handled above"),
    }
    outln!("# config hash {}", hash_text(&cfg.to_toml()));
    Ok(0)
}

fn cmd_verify() -> anyhow::Result<u8> {
    cmd_verify_into(None)
}

fn cmd_verify_into(out: Option<&Path>) -> anyhow::Result<u8> {
    let checks = verify()?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    out!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    if checks.iter().all(|c| c.passed) {
        Ok(0)
    } else {
        eprintln!("error: self-checks failed");
        Ok(EXIT_NUMERICAL)
    }
}
