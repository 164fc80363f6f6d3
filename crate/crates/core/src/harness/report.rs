use std::path::Path;

use serde::Serialize;

use super::svg::{line_chart, Series};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GiniRow {
    pub config_hash: String,
    pub seed: u64,
    /// Training key, or the map file name for imported maps.
    pub model: String,
    pub attribution: String,
    pub clean_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub global_gini: f64,
    pub regional_gini: f64,
    pub block: usize,
    /// Maps averaged; zero maps are skipped.
    pub maps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L1Row {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    /// Mean `‖∂f^y/∂x‖₁` of the true class.
    pub mean_l1: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub attack: String,
    pub k: usize,
    pub k_fraction: f64,
    pub error_rate: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoaRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub color: String,
    pub n: usize,
    pub r: usize,
    pub error_rate: f64,
    pub evaluated: usize,
    /// Mean occlusion iterations until misclassification or budget.
    pub mean_steps: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub corruption: String,
    pub severity: usize,
    pub parameter: f64,
    pub error_rate: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStatRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub k: usize,
    /// `sum_sq` is Σw², `sum_squared` is (Σw)².
    pub statistic: String,
    pub mean: f64,
    pub stderr: f64,
    pub selection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub confidence: f64,
    pub correct: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub method: String,
    pub lambda: f64,
    pub best_epoch: usize,
    /// File name under `checkpoints/`.
    pub checkpoint: String,
}

/// Every table the harness emits. Empty tables were not requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportBundle {
    pub config_hash: String,
    pub seed: u64,
    pub training: Vec<TrainRow>,
    pub gini: Vec<GiniRow>,
    pub l1: Vec<L1Row>,
    pub confidence: Vec<ConfidenceRow>,
    pub curves: Vec<CurveRow>,
    pub ioa: Vec<IoaRow>,
    pub corruption: Vec<CorruptionRow>,
    pub mask_stats: Vec<MaskStatRow>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl ReportBundle {
    pub fn is_empty(&self) -> bool {
        self.training.is_empty()
            && self.gini.is_empty()
            && self.l1.is_empty()
            && self.confidence.is_empty()
            && self.curves.is_empty()
            && self.ioa.is_empty()
            && self.corruption.is_empty()
            && self.mask_stats.is_empty()
    }

    /// Writes each non-empty table as CSV, `bundle.json` with all of them, and
    /// SVG charts for the curve tables.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        macro_rules! table {
            ($field:ident) => {
                if !self.$field.is_empty() {
                    write_csv(&dir.join(concat!(stringify!($field), ".csv")), &self.$field)?;
                }
            };
        }
        table!(training);
        table!(gini);
        table!(l1);
        table!(confidence);
        table!(curves);
        table!(ioa);
        table!(corruption);
        table!(mask_stats);
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_file(&dir.join("bundle.json"), &json)?;
        for (name, svg) in self.charts() {
            write_file(&dir.join(name), svg.as_bytes())?;
        }
        Ok(())
    }

    pub fn charts(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for attack in distinct(self.curves.iter().map(|r| r.attack.clone())) {
            let series = group(self.curves.iter().filter(|r| r.attack == attack), |r| {
                (r.model.clone(), (r.k_fraction, r.error_rate))
            });
            let title = format!("{} error rate", attack.to_uppercase());
            out.push((format!("curve_{attack}.svg"), line_chart(&title, "fraction of pixels", "error rate", &series)));
        }
        for kind in distinct(self.corruption.iter().map(|r| r.corruption.clone())) {
            let series = group(self.corruption.iter().filter(|r| r.corruption == kind), |r| {
                (r.model.clone(), (r.severity as f64, r.error_rate))
            });
            out.push((
                format!("corruption_{kind}.svg"),
                line_chart(&format!("{kind} noise"), "severity", "error rate", &series),
            ));
        }
        for stat in distinct(self.mask_stats.iter().map(|r| r.statistic.clone())) {
            let rows = self.mask_stats.iter().filter(|r| r.statistic == stat);
            let series = group(rows, |r| (format!("{} {}", r.model, r.selection), (r.k as f64, r.mean)));
            out.push((format!("mask_{stat}.svg"), line_chart(&stat, "masked pixels k", "mean", &series)));
        }
        out
    }
}

fn distinct(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for i in items {
        if !seen.contains(&i) {
            seen.push(i);
        }
    }
    seen
}

/// Series in first-appearance order.
fn group<'a, T: 'a>(rows: impl Iterator<Item = &'a T>, f: impl Fn(&T) -> (String, (f64, f64))) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let (label, p) = f(r);
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(p),
            None => out.push(Series { label, points: vec![p] }),
        }
    }
    out
}
