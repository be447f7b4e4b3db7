use std::path::Path;
use std::process::{Command, Output};

use canids::can_frame::read_log_file;

fn canids(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canids"))
        .args(args)
        .env_remove("CANIDS_CONFIG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn clean_run_exits_zero_and_reports() {
    let out = canids(&[
        "run",
        "-s",
        "3",
        "--synthetic",
        "5000",
        "--clock",
        "sim",
        "--pad-ms",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["scenario"], "S3_TwoTasksOneProcess");
    assert_eq!(v["windows"], 5);
    assert_eq!(v["config"]["queue_capacity"], 8);
}

#[test]
fn attacked_run_exits_two_and_writes_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let verdicts = dir.path().join("v.jsonl");
    let out = canids(&[
        "run",
        "-s",
        "4",
        "--synthetic",
        "6000",
        "--clock",
        "sim",
        "--attack-start",
        "3",
        "--attack-end",
        "4",
        "--verdicts",
        verdicts.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&verdicts).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[3]["label"], "Anomalous");
    assert_eq!(lines[0]["label"], "Warmup");
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(
        code(&canids(&["sweep", "--synthetic", "1000", "--rates", "fast,slow"])),
        64
    );
    assert_eq!(code(&canids(&["run", "--log", "a.log", "--synthetic", "10"])), 64);
    assert_eq!(code(&canids(&["no-such-command"])), 64);
    assert_eq!(code(&canids(&["--help"])), 0);
    assert_eq!(code(&canids(&["--version"])), 0);
}

#[test]
fn missing_log_is_a_runtime_failure() {
    let out = canids(&["calibrate", "--log", "/nonexistent/capture.log"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn calibrate_reports_threshold_and_series() {
    let out = canids(&["calibrate", "--synthetic", "30000", "--series"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["windows"], 30);
    assert_eq!(v["series_len"], 29);
    let tau = v["tau"].as_f64().unwrap();
    let series: Vec<f64> = v["series"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(tau, min - 0.01);
    assert!(tau > 0.9 && tau < 1.0, "{tau}");
}

#[test]
fn one_rate_sweep() {
    let out = canids(&[
        "sweep",
        "-s",
        "1",
        "--synthetic",
        "4000",
        "--clock",
        "sim",
        "--pad-ms",
        "30",
        "--rates",
        "250",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = json(&out);
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["loss_ratio"], 0.0);
    assert_eq!(rows[0]["batch_send_ms"], 4000.0);
}

#[test]
fn replay_writes_a_candump_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.log");
    let out = canids(&[
        "replay",
        "--synthetic",
        "50",
        "--clock",
        "sim",
        "--rate",
        "500",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let frames = read_log_file(Path::new(&path)).unwrap();
    assert_eq!(frames.len(), 50);
    assert_eq!(frames[1].timestamp_ns(), 2_000_000);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("canids.toml");
    std::fs::write(&cfg, "scenario = 1\nsynthetic = 3000\nclock = \"sim\"\nwindow = 500\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_canids"))
        .args(["run"])
        .env("CANIDS_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["scenario"], "S1_Inline");
    assert_eq!(v["config"]["w"], 500);
    assert_eq!(v["windows"], 6);

    std::fs::write(&cfg, "windw = 500\n").unwrap();
    let out = canids(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}
