use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fishbev::network::ModelConfig;
use serde_json::{json, Value};

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "model": ModelConfig::tiny(),
        "paths": { "dataset": "data", "checkpoints": "ckpt", "reports": "reports" },
        "dataset": { "train": 2, "val": 2 },
        "train": { "steps": 0, "batch_size": 2 },
        "bench": { "warmup": 0, "iterations": 2 }
    });
    merge(&mut cfg, extra);
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn fishbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fishbev"))
        .args(args)
        .env_remove("FISHBEV_REPORT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn missing_config_is_a_config_error() {
    let o = fishbev(&["inspect"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
}

#[test]
fn invalid_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "train": { "stepz": 3 } }));
    assert_eq!(code(&fishbev(&["--config", cfg.to_str().unwrap(), "inspect"])), 2);

    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&fishbev(&["--config", c, "--override", "no-equals-sign", "inspect"])), 2);
    assert_eq!(code(&fishbev(&["--config", c, "--override", "train.batch_size=0", "inspect"])), 2);
    assert_eq!(code(&fishbev(&["--config", c, "inspect", "nonsense"])), 2);
}

#[test]
fn seed_and_overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let o = fishbev(&[
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--override",
        "train.steps=7",
        "--override",
        "augmentation=none",
        "inspect",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["config"]["seed"], 11);
    assert_eq!(v["config"]["train"]["steps"], 7);
    assert_eq!(v["config"]["augmentation"], "none");
    assert_eq!(v["config"]["paths"]["dataset"], dir.path().join("data").to_str().unwrap());
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn schema_is_published() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let v = stdout_json(&fishbev(&["--config", cfg.to_str().unwrap(), "inspect", "schema"]));
    assert!(v["properties"]["train"].is_object(), "{v}");
}

#[test]
fn eval_below_threshold_exits_with_4_and_honors_report_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({ "eval": { "split": "train", "overlays": 1, "thresholds": { "min_f1": 0.99 } } }),
    );
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&fishbev(&["--config", c, "generate"])), 0);
    let o = fishbev(&["--config", c, "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let reports = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_fishbev"))
        .args(["--config", c, "eval"])
        .env("FISHBEV_REPORT_DIR", &reports)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(!v["failures"].as_array().unwrap().is_empty());
    assert!(reports.join("metrics.json").exists());
    assert!(reports.join("detections.jsonl").exists());
    assert!(fs::read_dir(&reports)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("overlay_")));

    // without thresholds the same evaluation succeeds
    let o = fishbev(&["--config", c, "--override", "eval.thresholds.min_f1=null", "eval"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({ "train": { "steps": 20, "checkpoint_every": 1, "schedule": { "start": 1e30, "max": 1e30, "end": 1e30 } } }),
    );
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&fishbev(&["--config", c, "generate"])), 0);
    let o = fishbev(&["--config", c, "train"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("ckpt/latest.ckpt").exists());
}

#[test]
fn bench_reports_stages_and_rejects_zero_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let o = fishbev(&["--config", c, "bench"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    for stage in ["backbone", "attention", "heads", "decode"] {
        assert!(v["stages"][stage]["p95_ms"].is_number());
    }
    assert!(dir.path().join("reports/bench.json").exists());
    assert_eq!(code(&fishbev(&["--config", c, "--override", "bench.iterations=0", "bench"])), 2);
}
