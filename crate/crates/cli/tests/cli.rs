use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .env_remove("FBSDE_OUT_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A quick row-2 style configuration written into `dir`.
fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut config = serde_json::json!({
        "id": "small",
        "problem": { "sigma": 1.0, "epsilon": 0.01, "T": 1.0, "x0": -1.0 },
        "solver": { "K": 5, "M": 100, "dt": 0.01, "seed": 3, "R": 2 },
        "reference": { "enabled": false }
    });
    if let (Some(target), Some(extra)) = (config.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            target.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reference_prints_the_pde_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbsde(&[
        "reference",
        "--sigma",
        "1.0",
        "--T",
        "1",
        "--x",
        "-1",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: f64 = stdout(&out)
        .trim()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((v - 1.745).abs() < 0.01, "V_ref = {v}");
    assert!(dir.path().join("reference.json").exists());
    assert!(dir.path().join("psi.csv").exists());
}

#[test]
fn solve_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), Value::Null);
    let out_dir = dir.path().join("out");
    let out = fbsde(&[
        "solve",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in [
        "coefficients.csv",
        "diagnostics.csv",
        "result.json",
        "metadata.json",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let result = read_json(&out_dir.join("result.json"));
    assert_eq!(result["id"], "small");
    let gamma = result["gamma_estimate"].as_f64().unwrap();
    assert!(gamma.is_finite() && gamma > 0.0, "γ = {gamma}");
    let diagnostics = fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap();
    assert_eq!(diagnostics.lines().count(), 101);
}

#[test]
fn results_are_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(
        dir.path(),
        serde_json::json!({ "importance_sampling": { "enabled": true, "M": 300 } }),
    );
    let mut files = Vec::new();
    for workers in ["1", "3"] {
        let out_dir = dir.path().join(format!("w{workers}"));
        let out = fbsde(&[
            "estimate",
            "--config",
            path_str(&config),
            "--workers",
            workers,
            "--out",
            path_str(&out_dir),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        files.push((
            fs::read(out_dir.join("result.json")).unwrap(),
            fs::read(out_dir.join("weights.csv")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn invalid_configuration_exits_with_one_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(
        dir.path(),
        serde_json::json!({ "solver": { "K": 0, "M": 100, "dt": 0.01 } }),
    );
    let out_dir = dir.path().join("out");
    let out = fbsde(&[
        "solve",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.K"));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_flags_are_rejected() {
    let out = fbsde(&["solve", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let help = fbsde(&["--help"]);
    assert!(help.status.success());
    assert!(stdout(&help).contains("early-horizon"));
}

#[test]
fn early_horizon_requires_a_drift_change() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), Value::Null);
    let out_dir = dir.path().join("out");
    let out = fbsde(&[
        "early-horizon",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("drift_change"));
    assert!(!out_dir.exists());
}

#[test]
fn simulate_summarises_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(
        dir.path(),
        serde_json::json!({ "outputs": { "trajectories": true } }),
    );
    let out_dir = dir.path().join("out");
    let out = fbsde(&[
        "simulate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = read_json(&out_dir.join("summary.json"));
    let frac = summary["exit_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    let rows = fs::read_to_string(out_dir.join("trajectories.csv"))
        .unwrap()
        .lines()
        .count();
    assert!(rows > 100);
}
