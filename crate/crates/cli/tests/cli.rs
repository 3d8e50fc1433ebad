use std::process::{Command, Output};

use serde_json::Value;

fn drdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drdm")).args(args).output().unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn bad_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[plan]\nn_steps = \"many\"\nstratgy = \"uniform\"\n\n[nope]\nx = 1\n").unwrap();
    let out = drdm(&["schedule", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    let problems = err["problems"].as_array().unwrap();
    assert_eq!(problems.len(), 3, "{problems:?}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = drdm(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["code"], 1);
}

#[test]
fn missing_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = drdm(&["sample", "--out", dir.path().to_str().unwrap(), "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn schedule_writes_csv_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = drdm(&["schedule", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary.is_object());
    let csv = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    // header plus steps 0..=N
    assert_eq!(csv.lines().count(), 302);
    assert!(dir.path().join("config.resolved.toml").exists());
}

#[test]
fn gradcheck_passes_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = drdm(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.is_object());
}
