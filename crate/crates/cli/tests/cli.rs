use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ant")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// A config small enough to run every stage in seconds.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = stdout_json(&ant(&["show-config"]));
    cfg["corpus"]["traces_per_archetype"] = json!(4);
    cfg["corpus"]["duration"] = json!(120.0);
    cfg["sweep_max_k"] = json!(6);
    cfg["classifier"]["stage_channels"] = json!([12, 12, 24]);
    cfg["classifier"]["fc"] = json!([8]);
    cfg["classifier"]["max_epochs"] = json!(2);
    cfg["rl"]["episodes"] = json!(2);
    cfg["rl"]["eval_every"] = json!(1);
    cfg["rl"]["arch"]["channels"] = json!(4);
    cfg["rl"]["arch"]["hidden"] = json!(8);
    cfg["video"]["chunks"] = json!(6);
    cfg["video"]["training_manifests"] = json!(1);
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn show_config_reflects_seed_override() {
    let cfg = stdout_json(&ant(&["show-config", "--seed", "42"]));
    assert_eq!(cfg["seed"], 42);
    assert_eq!(cfg["rl"]["seed"], 42);
    assert_eq!(cfg["classifier"]["seed"], 42);
    let full = stdout_json(&ant(&["show-config", "--preset", "full"]));
    assert_ne!(full["rl"]["arch"], cfg["rl"]["arch"]);
}

#[test]
fn stage_without_inputs_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = ant(&["cluster", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"], "eval");
    assert!(err["message"].as_str().unwrap().contains("missing artifact"), "{err}");
}

#[test]
fn invalid_config_is_rejected_before_any_stage_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = stdout_json(&ant(&["show-config"]));
    cfg["k"] = json!(1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = ant(&["corpus", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("invalid experiment config"));
    assert!(!out_dir.exists());
}

#[test]
fn stages_run_one_by_one_and_produce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();
    for verb in ["corpus", "cluster", "train-classifier", "train-zoo", "evaluate"] {
        let v = stdout_json(&ant(&[verb, "--config", &cfg, "--out", out]));
        assert_eq!(v["stage"], verb);
        let stage_dir = match verb {
            "train-classifier" => "classifier",
            "train-zoo" => "zoo",
            "evaluate" => "eval",
            other => other,
        };
        assert!(out_dir.join(stage_dir).join("stage.json").exists(), "{verb}");
    }
    let report = stdout_json(&ant(&["report", "--config", &cfg, "--out", out]));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r["mean_qoe"].is_number()));
    for file in ["summary.json", "summary.csv"] {
        assert!(out_dir.join("report").join(file).exists());
    }
}
