use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[grid]
points = 32
length = 25.132741228718345

[integrator]
dt = 0.25
t_end = 5.0
record_every = 0.25
checkpoint_every = 2.5

[diagnostics]
fit_window = [1.0, 5.0]
"#;

fn twofluid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twofluid")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn run_dirs(root: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn closure_prints_equal_gamma_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let out = twofluid(&["closure", "--output-dir", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["rho_plus"].as_f64().unwrap(), 2.0);
    assert_eq!(v["C2"].as_f64().unwrap(), 2.0);
    let dirs = run_dirs(tmp.path(), "closure-");
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].join("closure.json").exists());
    assert!(dirs[0].join("config.toml").exists());
    assert_eq!(manifest(&dirs[0])["status"], "complete");
}

#[test]
fn bad_configuration_and_usage_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let out = twofluid(&["closure", "--output-dir", root, "--set", "grid.points=15"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.points"));
    let out = twofluid(&["closure", "--output-dir", root, "--set", "grid.nonsense=1", "--set", "fluid.gamma_plus=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(twofluid(&["bogus"]).status.code(), Some(1));
    assert_eq!(twofluid(&["--help"]).status.code(), Some(0));
    let missing = tmp.path().join("missing.toml");
    assert_eq!(twofluid(&["closure", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn linsym_scan_reports_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = twofluid(&["linsym", "scan", "--output-dir", tmp.path().to_str().unwrap(), "--set", "linsym.radii=40"]);
    assert!(out.status.success());
    let v = json(&out);
    assert!(v["scan"]["c0_complement"].as_f64().unwrap() > 0.0);
    assert!(v["lyapunov_equivalence"]["min_eig"].as_f64().unwrap() > 0.0);
    assert!(run_dirs(tmp.path(), "linsym-scan-")[0].join("scan.json").exists());
}

#[test]
fn simulate_is_reproducible_and_restartable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (cfg, a, b) = (cfg.to_str().unwrap(), tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        let out = twofluid(&["simulate", "--config", cfg, "--output-dir", root.to_str().unwrap(), "--threads", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (da, db) = (run_dirs(&a, "simulate-"), run_dirs(&b, "simulate-"));
    assert_eq!(da.len(), 1);
    assert_eq!(da[0].file_name(), db[0].file_name());
    for f in ["series.csv", "report.json", "final.bfc", "checkpoint_00000010.bfc"] {
        let (x, y) = (fs::read(da[0].join(f)).unwrap(), fs::read(db[0].join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let m = manifest(&da[0]);
    assert_eq!(m["status"], "complete");
    assert!(m["files"].as_array().unwrap().iter().any(|f| f == "series.csv"));

    let restart = da[0].join("checkpoint_00000010.bfc");
    let c = tmp.path().join("c");
    let out = twofluid(&["simulate", "--config", cfg, "--output-dir", c.to_str().unwrap(), "--restart", restart.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dc = run_dirs(&c, "simulate-");
    assert_ne!(dc[0].file_name(), da[0].file_name());
    assert_eq!(fs::read(dc[0].join("final.bfc")).unwrap(), fs::read(da[0].join("final.bfc")).unwrap());

    let series = da[0].join("series.csv");
    let out = twofluid(&["decay-fit", "--config", cfg, "--output-dir", c.to_str().unwrap(), "--series", series.to_str().unwrap(), "--window", "1,5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let fits = v["fits"].as_array().unwrap();
    assert!(fits.iter().any(|f| f["quantity"] == "L2_c_plus" && f["measured"].as_f64().unwrap() < 0.0));

    let wrong = tmp.path().join("d");
    let out = twofluid(&["simulate", "--output-dir", wrong.to_str().unwrap(), "--restart", restart.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failed_simulation_leaves_marked_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = twofluid(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        tmp.path().to_str().unwrap(),
        "--set",
        "data.amplitude=50.0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = &run_dirs(tmp.path(), "simulate-")[0];
    assert!(dir.join("series.csv.partial").exists());
    assert!(!dir.join("series.csv").exists());
    assert!(!dir.join("report.json").exists());
    let m = manifest(dir);
    assert_eq!(m["status"], "failed");
    assert!(!m["error"].as_str().unwrap().is_empty());
}
