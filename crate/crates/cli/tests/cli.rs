use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sure")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut config = sure_core::pipeline::RunConfig::default();
    config.dataset.pretrain_samples = 1000;
    config.dataset.finetune_samples = 200;
    config.dataset.test_samples = 150;
    config.pretrain.epochs = 3;
    config.phase1.epochs = 3;
    config.phase2.epochs = 2;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let value: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(value["message"].as_str().is_some_and(|m| !m.is_empty()));
    value
}

#[test]
fn verify_passes() {
    let out = sure(&["verify"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn training_is_reproducible_and_eval_reads_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = sure(&["train", "--config", &config, "--seed", "3", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["summary.json", "records.csv", "convergence.csv", "metrics.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let out = sure(&["eval", "--run", a.to_str().unwrap(), "--scenario", "missing=0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(a.join("eval/records.csv")).unwrap();
    let mut lines = records.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "reconstructed").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 150);
    assert!(rows.iter().all(|r| r[0] == "missing=0" && r[col] == "0"));

    let out = sure(&["defer", "--run", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(a.join("defer/deferral.csv").exists());
}

#[test]
fn failures_are_one_json_line() {
    let unknown = error_line(&sure(&["train", "--bogus"]));
    assert_eq!(unknown["error"], "arguments");

    let missing = error_line(&sure(&["train", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]));
    assert_eq!(missing["error"], "io");

    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("run");
    let bad = error_line(&sure(&["train", "--config", &config, "--method", "bayes", "--out", out.to_str().unwrap()]));
    assert_eq!(bad["error"], "invalid_config");

    let scenario = error_line(&sure(&["eval", "--run", tmp.path().to_str().unwrap(), "--scenario", "missing=9"]));
    assert!(scenario["error"].is_string());
}
