use std::path::Path;
use std::process::Command;

use gradeq::attribution::{AttributionMap, Method};
use gradeq::Tensor;
use serde_json::{json, Value};

fn gradeq(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gradeq")).args(args).env("GRADEQ_THREADS", "2").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p.display().to_string()
}

fn map(dir: &Path) -> String {
    let values: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let m = AttributionMap::new(Tensor::new(vec![1, 4, 4], values).unwrap(), Method::Saliency, 0).unwrap();
    m.export(dir.join("m.f32")).unwrap();
    "m.f32".into()
}

#[test]
fn gini_run_succeeds_with_relative_paths_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({ "out_dir": "res", "gini": { "block": 2, "maps": [map(dir.path())] } }));
    let (code, err) = gradeq(&["gini", "--config", &cfg, "--seed", "11"]);
    assert_eq!(code, 0, "{err}");
    let b: Value = serde_json::from_slice(&std::fs::read(dir.path().join("res/bundle.json")).unwrap()).unwrap();
    assert_eq!(b["seed"], 11);
    assert_eq!(b["gini"][0]["seed"], 11);

    let out = dir.path().join("elsewhere");
    let (code, _) = gradeq(&["gini", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.join("gini.csv").exists());
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({ "gini": { "blok": 2 } }));
    assert_eq!(gradeq(&["gini", "--config", &cfg]).0, 2);
    let cfg = write_config(dir.path(), &json!({ "gini": {} }));
    assert_eq!(gradeq(&["attack", "--config", &cfg]).0, 2);
    assert_eq!(gradeq(&["gini", "--config", "/nonexistent.json"]).0, 2);
    assert_eq!(gradeq(&["train"]).0, 2);
}

#[test]
fn stage_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let cfg = write_config(
        dir.path(),
        &json!({
            "out_dir": "res",
            "dataset": {
                "source": { "cifar10_binary": { "train_files": [missing], "test_file": missing } },
                "train": 10, "val": 0, "test": 10
            },
            "model": { "architecture": { "mlp": { "hidden": [4] } }, "activation": "relu" },
            "train": [{ "method": { "kind": "standard" }, "epochs": 1, "lr": 0.1 }]
        }),
    );
    let (code, err) = gradeq(&["train", "--config", &cfg]);
    assert_eq!(code, 3);
    assert!(err.contains("stage `data` failed"), "{err}");
}
