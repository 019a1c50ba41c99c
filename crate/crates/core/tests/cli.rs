use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nrurn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrurn")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_polya_reports_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "polya.json",
        r#"{"weight":{"family":"linear","theta":1},"R":[[1,0],[0,1]],"n_max":100}"#,
    );
    let o = nrurn(&["analyze", "--config", &cfg]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["b"].as_f64().unwrap(), -1.0);
    assert_eq!(v["rho"].as_f64().unwrap(), 2.0);
    assert_eq!(v["regime"], "clt_sqrt_n");
    assert!((v["Sigma1"][0][0].as_f64().unwrap() - 1.0 / 12.0).abs() < 1e-12);
    assert_eq!(v["header"]["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn analyze_constant_weight_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "const.json",
        r#"{"weight":{"family":"constant","c":2},"R":[[0.3,0.7],[0.7,0.3]],"n_max":100}"#,
    );
    let o = nrurn(&["analyze", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["b"].as_f64().unwrap(), 0.0);
    assert_eq!(v["rho"].as_f64().unwrap(), 1.0);
    assert_eq!(v["stable"], true);
}

#[test]
fn analyze_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"weight":{"family":"exponential","theta":0.5},"R":[[0,1],[1,0]],"n_max":10}"#,
    );
    let out = dir.path().join("out");
    let o = nrurn(&["analyze", "--config", &cfg, "--emit", "both", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("report.json").exists());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains("rho")));
}

#[test]
fn bad_config_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"weight":{"family":"linear","theta":2},"R":[[1,0],[1,1]],"n_max":10}"#,
    );
    let o = nrurn(&["analyze", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("R"));

    let o = nrurn(&["analyze", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn simulate_zero_horizon_is_header_and_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "z.json",
        r#"{"weight":{"family":"linear","theta":1},"R":[[1,0],[0,1]],"n_max":0}"#,
    );
    let out = dir.path().join("o");
    let o = nrurn(&["simulate", "--config", &cfg, "--emit", "csv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 2);
    assert!(data[1].starts_with("0,0.5,0.5"));
}

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"weight":{"family":"linear","theta":2},"R":[[0.5,0.5],[0.2,0.8]],"n_max":5000,"seed":11}"#,
    );
    let a = nrurn(&["simulate", "--config", &cfg, "--emit", "csv"]);
    let b = nrurn(&["simulate", "--config", &cfg, "--emit", "csv"]);
    let c = nrurn(&["simulate", "--config", &cfg, "--emit", "csv", "--seed", "12"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn verify_polya_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.json",
        r#"{"weight":{"family":"linear","theta":1},"R":[[1,0],[0,1]],"n_max":10000,"replicas":1000,"seed":3}"#,
    );
    let out = dir.path().join("v");
    let o = nrurn(&["verify", "--config", &cfg, "--emit", "both", "--out", out.to_str().unwrap()]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS accounting")));
    assert!(!text.contains("FAIL"));
    assert!(out.join("summary.json").exists());
    assert!(out.join("summary.csv").exists());
}

#[test]
fn verify_unstable_case_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "u.json",
        r#"{"weight":{"family":"inverse_power","theta":0.25,"alpha":4},
            "R":[[0,0,0,1],[0,0,1,0],[0,1,0,0],[1,0,0,0]],"n_max":20000,"replicas":200,"seed":5}"#,
    );
    let o = nrurn(&["verify", "--config", &cfg]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("PASS non-convergence"), "{text}");
}

#[test]
fn regions_grid_csv() {
    let o = nrurn(&[
        "regions", "--family", "linear", "--k", "2", "--theta", "1:1.5", "--lambda", "-1:1", "--resolution", "11x41",
        "--emit", "csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 11 * 41);

    let o = nrurn(&["regions", "--family", "cubic", "--k", "2", "--theta", "1:2"]);
    assert_eq!(o.status.code(), Some(2));
}
