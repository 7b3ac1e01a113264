use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn tcv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcv"))
        .args(args)
        .env_remove("TCV_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn convexity_with_single_frame_count() {
    let out = tcv(&["verify", "convexity", "--frames", "16"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["check_id"], "convexity");
    assert_eq!(reports[0]["pass"], true);
    assert!(reports[0]["details"]["min_eig_T16"].is_number());
    assert_eq!(v["suite"]["total"], 1);
}

#[test]
fn verify_all_is_deterministic_and_passes() {
    let a = tcv(&["verify", "all", "--seed", "42"]);
    let b = tcv(&["verify", "all", "--seed", "42"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    assert_eq!(v["reports"].as_array().unwrap().len(), 14);
    assert_eq!(v["suite"]["pass"], true);
    assert_eq!(v["config_echo"]["seed"], 42);
}

#[test]
fn seed_flag_beats_environment() {
    let run = |env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tcv"));
        cmd.args(args).env_remove("TCV_SEED");
        if let Some(seed) = env {
            cmd.env("TCV_SEED", seed);
        }
        json(&cmd.output().unwrap())["config_echo"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(Some("9"), &["verify", "convexity"]), 9);
    assert_eq!(run(Some("9"), &["verify", "convexity", "--seed", "3"]), 3);
}

#[test]
fn missing_config_exits_with_two_and_no_stdout() {
    let out = tcv(&["verify", "all", "--config", "/nonexistent/tcv.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn invalid_config_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"frames": 2}"#).unwrap();
    let out = tcv(&["verify", "temporal", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&path, r#"{"no_such_field": 1}"#).unwrap();
    let out = tcv(&["verify", "temporal", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tcv(&["verify", "everything"]).status.code(), Some(2));
    assert_eq!(tcv(&["verify", "all", "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn failing_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.json");
    fs::write(&path, r#"{"tolerances": {"fd_rtol": 0.0}, "checks": ["sim-grad-fd"]}"#).unwrap();
    let out = tcv(&["verify", "all", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert_eq!(v["suite"]["failed"], 1);
    assert_eq!(v["reports"][0]["pass"], false);
}

#[test]
fn out_dir_receives_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = tcv(&["verify", "bilateral", "--format", "both", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("reports.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("check_id,pass,measured,bound,comparison,tolerance,trials,seed"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("bilateral-weights,true,"));
    let saved: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, json(&out));
}

#[test]
fn trials_override_applies_to_reports() {
    let v = json(&tcv(&["verify", "sim-grad", "--trials", "20"]));
    for r in v["reports"].as_array().unwrap() {
        assert_eq!(r["trials"], 20);
    }
}

#[test]
fn experiment_prints_a_step_series() {
    let out = tcv(&["experiment", "token-sufficiency"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,alignment_error"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.len() > 1);
    assert!(values.last().unwrap() < &values[0]);
}
