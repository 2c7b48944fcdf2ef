use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hwdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwdiff")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_model(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const TWO_PHASE: &str = r#"{"d": 2, "P": [[0, 0.2], [0, 0]], "v": [1, 2], "p": [1, 0], "alpha": 0.5, "beta": 1, "ca2": 1}"#;

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn schedule_prints_eta_and_n() {
    let o = hwdiff(&["schedule", "--delta", "0.1", "--varsigma", "0.2", "--safety", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    assert!((field(&line, "eta") - 10f64.powf(-2.5)).abs() < 1e-15);
    assert_eq!(field(&line, "N"), 729.0);
}

#[test]
fn model_check_reports_constants() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", TWO_PHASE);
    let o = hwdiff(&["model-check", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    // 1/zeta = e'R^{-1}p with R = (I - P') diag(1, 2): R^{-1}p = (1, 0.1).
    assert!((field(&line, "zeta") - 1.0 / 1.1).abs() < 1e-12);
    assert!((field(&line, "e'gamma") - 1.0).abs() < 1e-12);
    assert!(field(&line, "min_eig") > 0.0);
}

#[test]
fn strict_mean_rejects_non_unit_mean() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", TWO_PHASE);
    let o = hwdiff(&["model-check", "--model", model.to_str().unwrap(), "--strict-mean"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("zeta"));
}

#[test]
fn missing_model_file_names_the_path() {
    let o = hwdiff(&["model-check", "--model", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/definitely/not/here.json"));
}

#[test]
fn invalid_model_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TWO_PHASE.replace("\"alpha\": 0.5", "\"alpha\": -1");
    let model = write_model(dir.path(), "bad.json", &bad);
    let o = hwdiff(&["model-check", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("$.alpha"), "{}", stderr(&o));
}

#[test]
fn usage_errors_name_the_flag() {
    let o = hwdiff(&["schedule", "--delta", "0.1", "--varsigma", "0.2", "--frobnicate", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--frobnicate"));

    let o = hwdiff(&["simulate", "--model", "m.json", "--eta", "2", "--steps", "10", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--eta"));
}

#[test]
fn out_of_range_schedule_is_a_validation_error() {
    let o = hwdiff(&["schedule", "--delta", "1.5", "--varsigma", "0.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("delta"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(hwdiff(&["--help"]).status.code(), Some(0));
    assert_eq!(hwdiff(&["--version"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let o = hwdiff(&[
        "benchmark-1d",
        "--beta",
        "1",
        "--alpha",
        "0.5",
        "--eta-sweep",
        "0.1,0.05,0.025,0.0125",
        "--steps-per-eta",
        "100",
        "--replicas",
        "1",
        "--burn-in-time",
        "1",
        "--out",
        "/definitely/not/here/bench.csv",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn simulate_writes_checkpoints_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", TWO_PHASE);
    let out = dir.path().join("run.csv");
    let o = hwdiff(&[
        "simulate",
        "--model",
        model.to_str().unwrap(),
        "--eta",
        "0.01",
        "--steps",
        "4000",
        "--burn-in",
        "1000",
        "--replicas",
        "2",
        "--checkpoint",
        "1000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# hwdiff "));
    assert!(lines.iter().any(|l| l.starts_with("# config {")));
    let header = lines.iter().position(|l| l.starts_with("step,")).unwrap();
    assert_eq!(lines[header], "step,samples,mean_1,mean_2,second_moment_1,second_moment_2,mean_tanh-sum");
    // Checkpoints at 2000, 3000, 4000 (the one at 1000 has no samples yet).
    let rows: Vec<Vec<&str>> = lines[header + 1..].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["2000", "3000", "4000"]);
    assert_eq!(rows[2][1], "6000");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.csv.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["ergodic_average"]["samples"], 6000);
    assert_eq!(summary["result"]["final_state_ensemble"]["states"].as_array().unwrap().len(), 2);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.csv.meta.json")).unwrap()).unwrap();
    assert!(meta["elapsed_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn quiet_suppresses_the_summary() {
    let o = hwdiff(&["schedule", "--delta", "0.1", "--varsigma", "0.2", "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}
