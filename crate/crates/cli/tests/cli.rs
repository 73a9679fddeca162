use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nudgerom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nudgerom"))
        .args(args)
        .current_dir(dir)
        .env("NUDGEROM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nudgerom(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Small forced run, 8x8 observations and a basis from the same snapshots.
fn pipeline(dir: &Path) {
    ok(dir, &["dns", "--n", "32", "--nu", "0.05", "--t-end", "1", "--ic", "random:3", "--snapshot-stride", "5", "--out", "s.bin"]);
    ok(dir, &["observe", "--snapshots", "s.bin", "--cells", "8", "--out", "o.bin"]);
    ok(dir, &["pod", "--snapshots", "s.bin", "--out", "b.bin"]);
}

const ROM: [&str; 10] = ["--basis", "b.bin", "--obs", "o.bin", "--r", "6", "--nu", "0.05", "--truth", "s.bin"];

#[test]
fn pipeline_runs_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let mut args = ROM.to_vec();
    args.extend(["--mu", "100", "--out", "a.csv", "--plot", "plots"]);
    let summary = ok(p, &[&["darom"], args.as_slice()].concat());
    assert!(summary.contains("final L2 error"), "{summary}");
    args[13] = "b.csv";
    ok(p, &[&["darom"], args.as_slice()].concat());
    let (a, b) = (fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("b.csv")).unwrap());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().any(|l| l == "step,time,mu,energy_rom,energy_true,l2_error,dat"));
    assert!(text.starts_with("# basis: "));
    assert!(p.join("plots/darom.py").exists() && p.join("plots/darom.svg").exists());
}

#[test]
fn sweep_writes_one_csv_per_mu_and_a_summary() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let mut args = vec!["sweep"];
    args.extend(ROM);
    args.extend(["--mu-list", "0,10,100", "--out-dir", "sw"]);
    let out = ok(p, &args);
    for f in ["mu_0.csv", "mu_10.csv", "mu_100.csv", "summary.csv", "runs.py", "runs.svg"] {
        assert!(p.join("sw").join(f).exists(), "{f}");
    }
    assert!(out.contains("# mu_list: 0,10,100"), "{out}");
    // the nudged runs beat the plain ROM
    let err = |label: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(&format!("{label},"))).unwrap();
        line.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(err("mu=100") < err("mu=0"));
}

#[test]
fn adaptive_darom_plots_four_panels() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let mut args = vec!["darom"];
    args.extend(ROM);
    args.extend(["--mu", "adaptive", "--mu0", "50", "--out", "ad.csv", "--plot", "plots"]);
    ok(p, &args);
    let script = fs::read_to_string(p.join("plots/darom.py")).unwrap();
    assert!(script.contains("plt.subplots(4, 1"), "{script}");
}

#[test]
fn input_errors_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let code = |args: &[&str]| nudgerom(p, args).status.code();
    assert_eq!(code(&["darom", "--basis", "b.bin", "--obs", "o.bin", "--r", "6", "--mu", "lots", "--out", "x.csv"]), Some(2));
    assert_eq!(code(&["darom", "--basis", "b.bin", "--obs", "o.bin", "--r", "999", "--mu", "1", "--out", "x.csv"]), Some(2));
    assert_eq!(code(&["darom", "--basis", "missing.bin", "--obs", "o.bin", "--r", "2", "--mu", "1", "--out", "x.csv"]), Some(2));
    assert_eq!(code(&["observe", "--snapshots", "s.bin", "--cells", "64", "--out", "x.bin"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    fs::write(p.join("bad.toml"), "kind = \"mu_sweep\"\n[darom]\nmu_typo = 3\n").unwrap();
    let out = nudgerom(p, &["report", "--config", "bad.toml", "--out-dir", "rep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu_typo"));
    let threads = Command::new(env!("CARGO_BIN_EXE_nudgerom"))
        .arg("verify")
        .env("NUDGEROM_THREADS", "none")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let mut args = vec!["darom"];
    args.extend(ROM);
    args.extend(["--mu", "10", "--picard-tol", "1e-300", "--picard-max-iters", "1", "--out", "x.csv"]);
    let out = nudgerom(p, &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stagnated"));
}

#[test]
fn verify_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["verify"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.lines().count() >= 3);
}
