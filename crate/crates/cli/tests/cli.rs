//! End-to-end checks of the command-line interface: output shapes,
//! reproducibility, manifest reruns, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_alphacal")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn alphacal")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("alphacal-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn truth_curve_shape_contract() {
    let out = tmp("tc");
    let res = run(&[
        "truth-curve",
        "--preset",
        "example1",
        "--alphas",
        "0.25,0.5,1,2,3",
        "--reps",
        "2000",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = read(&out.join("curve.csv"));
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines[0], "alpha,psi1,psi1_se,psiz,psiz_se");
    assert_eq!(lines.len(), 6); // header + 5 rows
    for (line, alpha) in lines[1..].iter().zip(["0.25", "0.5", "1", "2", "3"]) {
        assert!(line.starts_with(&format!("{alpha},")));
        assert_eq!(line.split(',').count(), 5);
    }
}

#[test]
fn simulate_estimate_round_trip_and_special_case() {
    // Uncensored no-arm cohort at alpha = 1: the targeted estimate equals the
    // empirical mean of N^1(tau) (checked loosely here; the tight tolerance
    // lives in the acceptance suite).
    let sim = tmp("sim");
    let res = run(&[
        "simulate",
        "--preset",
        "example1",
        "--set",
        "propensity.value=0.5",
        "--n",
        "400",
        "--seed",
        "9",
        "--arm",
        "none",
        "--alpha",
        "1.0",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = read(&sim.join("cohort.csv"));
    assert!(csv.starts_with("id,l0,a0,time,mark"));
    assert!(!csv.contains(",c\n"), "intervened cohort must be uncensored");

    let est = tmp("est");
    let res = run(&[
        "estimate",
        "--cohort",
        sim.join("cohort.csv").to_str().unwrap(),
        "--manifest",
        sim.join("manifest.json").to_str().unwrap(),
        "--alpha",
        "1.0",
        "--arm",
        "none",
        "--x",
        "outcome1",
        "--grid-size",
        "400",
        "--out",
        est.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&est.join("estimate.json"))).unwrap();

    // empirical mean of the outcome indicator from the CSV
    let events = csv.lines().filter(|l| l.ends_with(",1") && l.split(',').count() == 5).count();
    let n = 400.0;
    let psi = report["psi_hat"].as_f64().unwrap();
    assert!(
        (psi - events as f64 / n).abs() < 0.01,
        "psi {psi} vs empirical {}",
        events as f64 / n
    );
}

#[test]
fn identical_config_and_seed_reproduce_byte_identical_outputs() {
    let a = tmp("repro-a");
    let b = tmp("repro-b");
    for out in [&a, &b] {
        let res = run(&[
            "simulate",
            "--preset",
            "example3",
            "--n",
            "150",
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    assert_eq!(read(&a.join("cohort.csv")), read(&b.join("cohort.csv")));
    assert_eq!(read(&a.join("manifest.json")), read(&b.join("manifest.json")));
}

#[test]
fn rerun_from_manifest_reproduces_run() {
    let first = tmp("rerun-first");
    let res = run(&[
        "truth-curve",
        "--preset",
        "example2",
        "--alphas",
        "0.5,1",
        "--reps",
        "1500",
        "--seed",
        "7",
        "--arm",
        "1",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(res.status.success());

    let second = tmp("rerun-second");
    let res = run(&[
        "rerun",
        "--manifest",
        first.join("run_manifest.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read(&first.join("curve.csv")), read(&second.join("curve.csv")));
}

#[test]
fn config_errors_exit_two() {
    let out = tmp("cfg");
    let res = run(&[
        "truth-curve",
        "--preset",
        "nonexistent",
        "--alphas",
        "1",
        "--reps",
        "10",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("\"kind\":\"config\""), "stderr: {err}");
}

#[test]
fn infeasible_target_exits_three_with_l_hat() {
    let out = tmp("infeas");
    let res = run(&[
        "calibrate",
        "--mode",
        "oracle",
        "--preset",
        "example1",
        "--kind",
        "fixed",
        "--theta",
        "0.999",
        "--reps",
        "5000",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("infeasible_target"), "stderr: {err}");
    assert!(err.contains("achievable interval"), "stderr: {err}");
}

#[test]
fn scenario_file_and_overrides() {
    // Write a scenario file, override a coefficient from the command line,
    // and check the manifest reflects the override.
    let dir = tmp("scen");
    fs::create_dir_all(&dir).unwrap();
    let scenario = r#"
j = 1
tau = 2.0

[l0]
kind = "uniform01"

[models."1"]
eta = 0.2
nu = 1.0

[models.ell]
eta = 0.0
nu = 1.0

[models.z]
eta = 0.3
nu = 1.0

[models.c]
eta = 0.0
nu = 1.0
"#;
    let path = dir.join("scenario.toml");
    fs::write(&path, scenario).unwrap();
    let out = tmp("scen-out");
    let res = run(&[
        "simulate",
        "--scenario",
        path.to_str().unwrap(),
        "--set",
        "models.z.eta=0.6",
        "--n",
        "50",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["scenario"]["models"]["z"]["eta"].as_f64(), Some(0.6));
}
