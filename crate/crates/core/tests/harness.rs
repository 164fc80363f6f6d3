use std::path::Path;

use gradeq::attribution::{AttributionMap, Method};
use gradeq::autodiff::{Graph, NodeId};
use gradeq::data::ImageBatch;
use gradeq::harness::{confidence_stats, run, ExperimentConfig, Stage};
use gradeq::inequality::{gini, regional_gini};
use gradeq::models::ScoreModel;
use gradeq::{Error, Result, Tensor};
use serde_json::{json, Value};

/// Logits equal the input pixels.
struct Passthrough(Vec<usize>);

impl ScoreModel for Passthrough {
    fn input_shape(&self) -> &[usize] {
        &self.0
    }
    fn classes(&self) -> usize {
        self.0[2]
    }
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.shape(x)[0];
        g.reshape(x, &[n, self.0[2]])
    }
}

fn batch(rows: &[[f64; 3]], labels: Vec<usize>) -> ImageBatch {
    let data = rows.iter().flatten().copied().collect();
    ImageBatch::new(Tensor::new(vec![rows.len(), 1, 1, 3], data).unwrap(), labels, 3).unwrap()
}

#[test]
fn confidence_matches_hand_softmax() {
    let m = Passthrough(vec![1, 1, 3]);
    // Third sample is misclassified and ignored.
    let b = batch(&[[0.9, 0.1, 0.3], [0.2, 0.7, 0.6], [0.5, 0.1, 0.2]], vec![0, 1, 2]);
    let c = confidence_stats(&m, &b).unwrap();
    assert_eq!((c.correct, c.total), (2, 3));
    let hand = (0.500465282520298 + 0.39818934104493603) / 2.0;
    assert!((c.mean - hand).abs() < 1e-6, "{} vs {hand}", c.mean);
}

#[test]
fn uniform_logits_give_one_over_classes_with_lowest_index_correct() {
    let m = Passthrough(vec![1, 1, 3]);
    let b = batch(&[[0.4, 0.4, 0.4], [0.4, 0.4, 0.4], [0.4, 0.4, 0.4]], vec![0, 1, 2]);
    let c = confidence_stats(&m, &b).unwrap();
    assert_eq!(c.correct, 1);
    assert!((c.mean - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_full_confidence() {
    // Pixels are bounded, so saturate through a wrapper that scales logits.
    struct Scaled(Passthrough);
    impl ScoreModel for Scaled {
        fn input_shape(&self) -> &[usize] {
            self.0.input_shape()
        }
        fn classes(&self) -> usize {
            3
        }
        fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
            let l = self.0.logits(g, x)?;
            g.scale(l, 1e3)
        }
    }
    let b = batch(&[[1.0, 0.0, 0.0]], vec![0]);
    let c = confidence_stats(&Scaled(Passthrough(vec![1, 1, 3])), &b).unwrap();
    assert_eq!(c.mean, 1.0);
}

fn map_fixture(dir: &Path) -> std::path::PathBuf {
    let values: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let map = AttributionMap::new(Tensor::new(vec![1, 8, 8], values).unwrap(), Method::Saliency, 2).unwrap();
    let path = dir.join("map.f32");
    map.export(&path).unwrap();
    path
}

#[test]
fn gini_only_config_yields_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let map = map_fixture(dir.path());
    let out = dir.path().join("out");
    let cfg = ExperimentConfig::from_json(
        &json!({ "seed": 3, "out_dir": out, "gini": { "block": 4, "maps": [map] } }).to_string(),
    )
    .unwrap();
    let bundle = run(&cfg, Stage::Gini).unwrap();
    assert_eq!(bundle.gini.len(), 1);
    let reduced = AttributionMap::import(&map).unwrap().reduced;
    assert_eq!(bundle.gini[0].global_gini, gini(reduced.data()).unwrap());
    assert_eq!(bundle.gini[0].regional_gini, regional_gini(&reduced, 4).unwrap());

    let written: Value = serde_json::from_slice(&std::fs::read(out.join("bundle.json")).unwrap()).unwrap();
    let rows = written["gini"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["seed"], 3);
    assert_eq!(rows[0]["config_hash"], cfg.hash());
    assert_eq!(rows[0]["clean_acc"], Value::Null);
    for t in ["training", "l1", "curves", "ioa", "corruption", "mask_stats", "confidence"] {
        assert!(written[t].as_array().unwrap().is_empty(), "{t}");
    }
}

fn desk(out: &Path) -> Value {
    json!({
        "seed": 5,
        "out_dir": out,
        "dataset": {
            "source": { "synthetic_blobs": { "resolution": 8, "classes": 2, "seed": 1, "blob_sigma": 1.5 } },
            "train": 64, "val": 16, "test": 32, "normalize": true
        },
        "model": { "architecture": { "mlp": { "hidden": [8] } }, "activation": "softplus" },
        "train": [
            { "method": { "kind": "standard" }, "epochs": 2, "lr": 0.05, "batch_size": 32 },
            { "method": { "kind": "pgdat" }, "epochs": 2, "lr": 0.05, "batch_size": 32 },
            { "method": { "kind": "pgdat_cutout", "hole": 2 }, "epochs": 2, "lr": 0.05, "batch_size": 32 },
            { "method": { "kind": "igd", "lambda": 2.0 }, "epochs": 2, "lr": 0.05, "batch_size": 32 }
        ],
        "evaluate": { "pgd": { "eps": 0.03, "step": 0.01, "iters": 3 } },
        "attacks": { "k_fractions": [0.1, 0.25], "ioa": { "n": 1, "r": 1, "colors": ["black"] } },
        "corruptions": { "severities": [1, 5] },
        "theory": { "k_fractions": [0.25, 0.5], "draws": 4, "samples": 8 }
    })
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "run.log")
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn full_report_is_complete_and_rerun_is_cached_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = ExperimentConfig::from_json(&desk(&out).to_string()).unwrap();
    let bundle = run(&cfg, Stage::Report).unwrap();
    for f in [
        "training.csv", "gini.csv", "l1.csv", "confidence.csv", "curves.csv", "ioa.csv", "corruption.csv",
        "mask_stats.csv", "bundle.json", "curve_ina1.svg", "curve_ina2.svg", "curve_rn.svg",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(bundle.training.len(), 4);
    assert_eq!(bundle.gini.len(), 4);
    // 3 curve attacks x 2 k x 4 models.
    assert_eq!(bundle.curves.len(), 24);
    assert!(bundle.curves.iter().all(|r| r.seed == 5 && r.config_hash == cfg.hash()));

    let before = snapshot(&out);
    let again = run(&cfg, Stage::Report).unwrap();
    assert_eq!(bundle, again);
    assert_eq!(before, snapshot(&out));
    let log = std::fs::read_to_string(out.join("run.log")).unwrap();
    assert_eq!(log.matches(" cached -> ").count(), 4);
}

#[test]
fn config_hash_ignores_seed_and_output_only() {
    let a = ExperimentConfig::from_json(&desk(Path::new("a")).to_string()).unwrap();
    let mut b = ExperimentConfig::from_json(&desk(Path::new("b")).to_string()).unwrap();
    b.seed = 99;
    assert_eq!(a.hash(), b.hash());
    b.gini.block = 2;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn strict_configs_reject_typos_and_bad_references() {
    let out = Path::new("unused");
    let mut v = desk(out);
    v["train"][0]["epoch"] = json!(3);
    assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));

    let mut v = desk(out);
    v["train"][1]["method"] = json!({ "kind": "standard" });
    let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("duplicate")));

    let mut v = desk(out);
    v["teacher"] = json!("pgdat_missing");
    let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
    assert!(cfg.validate().is_err());

    let mut v = desk(out);
    v["train"][3]["teacher"] = json!("/nonexistent/teacher.igdc");
    let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("does not exist")));
}

#[test]
fn stage_failure_keeps_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let map = map_fixture(dir.path());
    let out = dir.path().join("out");
    let mut v = desk(&out);
    v["gini"] = json!({ "maps": [map] });
    v["dataset"]["source"] = json!({
        "cifar10_binary": { "train_files": [dir.path().join("missing.bin")], "test_file": dir.path().join("missing.bin") }
    });
    let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
    match run(&cfg, Stage::Gini) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("expected a stage error, got {other:?}"),
    }
    assert!(out.join("gini.csv").exists());
}
