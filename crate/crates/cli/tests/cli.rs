//! End-to-end runs of the `balance` binary through its public interface.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn balance() -> Command {
    Command::new(env!("CARGO_BIN_EXE_balance"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("balance-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn prw_both_methods_agree() {
    let dir = workdir("prw");
    let m1 = dir.join("m1.json");
    let m2 = dir.join("m2.json");
    fs::write(&m1, r#"[{"point": [0.0], "weight": 2.0}]"#).unwrap();
    fs::write(&m2, r#"[{"point": [0.0], "weight": 1.0}]"#).unwrap();
    let out = balance()
        .args([m1.to_str().unwrap(), m2.to_str().unwrap()])
        .arg("--b=3")
        .arg("--method=both")
        .arg("prw")
        .output();
    // clap expects the subcommand first
    assert!(out.is_err() || !out.unwrap().status.success());

    let out = balance()
        .arg("prw")
        .args([m1.to_str().unwrap(), m2.to_str().unwrap()])
        .arg("--b=3")
        .arg("--method=both")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    // one unit destroyed at cost 3
    assert!(text.contains("direct 3"), "{text}");
    assert!(text.contains("augmented 3"), "{text}");
}

#[test]
fn solve_lattice_writes_flow_csv() {
    let dir = workdir("lattice");
    let out_csv = dir.join("flow.csv");
    let out = balance()
        .args(["solve-lattice", "--scenario", "pure_growth", "--h", "0.5", "--steps", "100"])
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mass: f64 = text.trim().strip_prefix("final mass ").unwrap().parse().unwrap();
    assert!((mass - 1.0f64.exp()).abs() < 1e-5, "{mass}");
    let csv = fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("t,state,weight\n"));
    assert!(csv.lines().count() > 100);
}

#[test]
fn solve_particles_with_residual_log() {
    let dir = workdir("particles");
    let out_csv = dir.join("flow.csv");
    let log = dir.join("residuals.csv");
    let out = balance()
        .args(["solve-particles", "--scenario", "logistic_growth", "-N", "16", "--steps", "200"])
        .arg("--out")
        .arg(&out_csv)
        .arg("--residual-log")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("iterations "), "{text}");
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("iteration,residual\n"));
    assert!(log_text.lines().count() >= 2);
}

#[test]
fn scenario_file_overrides_horizon() {
    let dir = workdir("scenario");
    let file = dir.join("case.json");
    fs::write(&file, r#"{"scenario": "pure_growth", "overrides": {"T": 1.0, "steps": 100}}"#)
        .unwrap();
    let out_csv = dir.join("flow.csv");
    let out = balance()
        .arg("solve-lattice")
        .arg("--scenario-file")
        .arg(&file)
        .args(["--h", "0.5"])
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mass: f64 = text.trim().strip_prefix("final mass ").unwrap().parse().unwrap();
    // halved horizon: e^{0.5} instead of e
    assert!((mass - 0.5f64.exp()).abs() < 1e-5, "{mass}");
}

#[test]
fn lattice_inspect_reports_consistency() {
    let dir = workdir("inspect");
    let triplets = dir.join("matrix.csv");
    let out = balance()
        .args(["lattice", "inspect", "--scenario", "advection1d", "--h", "0.2", "--probes", "200"])
        .arg("--matrix-out")
        .arg(&triplets)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("points "), "{text}");
    assert!(text.contains("drift worst "), "{text}");
    let m = fs::read_to_string(&triplets).unwrap();
    assert!(m.starts_with("row,col,rate\n"));
}

#[test]
fn convergence_report_and_exit_code() {
    let dir = workdir("convergence");
    let report = dir.join("report.csv");
    let out = balance()
        .args(["convergence", "--scenario", "advection1d", "--h-list", "0.4,0.2"])
        .args(["--ref-n", "64", "--ref-steps", "400"])
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("h,epsilon,initial_error,error_T,error_sup,runtime_s\n"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn unknown_scenario_fails_cleanly() {
    let out = balance()
        .args(["solve-lattice", "--scenario", "no_such_thing", "--out", "/dev/null"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("error"), "{err}");
}
