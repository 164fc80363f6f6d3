use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{Color, Corruption, PgdConfig, SeverityTable, DEFAULT_K_FRACTIONS};
use crate::attribution::Method;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::models::{hex_digest, Activation, Architecture};
use crate::theory::Selection;
use crate::training::{TrainConfig, TrainMethod};

/// One experiment: a dataset, a shared initialization, a list of training
/// entries and the evaluations to run on the resulting models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Entries keyed by [`TrainConfig::key`]. Their `seed` is replaced by the global seed.
    #[serde(default)]
    pub train: Vec<TrainConfig>,
    /// Key of the entry that teaches `igd` entries without an explicit
    /// `teacher` path; defaults to the first `standard` entry.
    #[serde(default)]
    pub teacher: Option<String>,
    #[serde(default)]
    pub evaluate: EvaluatePlan,
    #[serde(default)]
    pub gini: GiniPlan,
    #[serde(default)]
    pub attacks: Option<AttackPlan>,
    #[serde(default)]
    pub corruptions: Option<CorruptionPlan>,
    #[serde(default)]
    pub theory: Option<TheoryPlan>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatePlan {
    #[serde(default = "PgdConfig::standard")]
    pub pgd: PgdConfig,
    /// Leading test samples to use; all when absent.
    #[serde(default)]
    pub samples: Option<usize>,
}

impl Default for EvaluatePlan {
    fn default() -> Self {
        Self { pgd: PgdConfig::standard(), samples: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GiniPlan {
    #[serde(default = "default_block")]
    pub block: usize,
    #[serde(default = "saliency")]
    pub method: Method,
    /// Exported attribution maps scored as extra rows.
    #[serde(default)]
    pub maps: Vec<PathBuf>,
}

impl Default for GiniPlan {
    fn default() -> Self {
        Self { block: default_block(), method: Method::Saliency, maps: Vec::new() }
    }
}

fn default_block() -> usize {
    4
}
fn saliency() -> Method {
    Method::Saliency
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAttack {
    Ina1,
    Ina2,
    Rn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    #[serde(default = "default_fractions")]
    pub k_fractions: Vec<f64>,
    #[serde(default = "default_curves")]
    pub curves: Vec<CurveAttack>,
    #[serde(default)]
    pub ioa: Option<IoaPlan>,
    #[serde(default = "saliency")]
    pub attribution: Method,
    #[serde(default)]
    pub samples: Option<usize>,
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_K_FRACTIONS.to_vec()
}
fn default_curves() -> Vec<CurveAttack> {
    vec![CurveAttack::Ina1, CurveAttack::Ina2, CurveAttack::Rn]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoaPlan {
    pub n: usize,
    pub r: usize,
    #[serde(default = "all_colors")]
    pub colors: Vec<Color>,
}

fn all_colors() -> Vec<Color> {
    vec![Color::Black, Color::Gray, Color::White]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPlan {
    #[serde(default = "all_corruptions")]
    pub kinds: Vec<Corruption>,
    #[serde(default = "all_severities")]
    pub severities: Vec<usize>,
    #[serde(default)]
    pub table: SeverityTable,
    #[serde(default)]
    pub samples: Option<usize>,
}

fn all_corruptions() -> Vec<Corruption> {
    vec![Corruption::Gaussian, Corruption::Shot, Corruption::Impulse]
}
fn all_severities() -> Vec<usize> {
    (1..=5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryPlan {
    #[serde(default = "default_fractions")]
    pub k_fractions: Vec<f64>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Test samples whose linearizations are averaged.
    #[serde(default = "default_theory_samples")]
    pub samples: usize,
    #[serde(default = "both_selections")]
    pub selections: Vec<Selection>,
}

fn default_draws() -> usize {
    64
}
fn default_theory_samples() -> usize {
    100
}
fn both_selections() -> Vec<Selection> {
    vec![Selection::Random, Selection::AttributionRanked]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative paths inside the config are relative to the config file.
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for m in &mut self.gini.maps {
            fix(m);
        }
        for t in &mut self.train {
            if let Some(p) = &mut t.teacher {
                fix(p);
            }
        }
        if let Some(d) = &mut self.dataset {
            use crate::data::DataSource::*;
            match &mut d.source {
                Cifar10Binary { train_files, test_file } | Cifar100Binary { train_files, test_file } => {
                    train_files.iter_mut().for_each(fix);
                    fix(test_file);
                }
                SyntheticBlobs(_) => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.train.is_empty() && (self.dataset.is_none() || self.model.is_none()) {
            return bad("training entries need both `dataset` and `model`".into());
        }
        let mut keys = BTreeSet::new();
        for t in &self.train {
            t.validate()?;
            let key = t.key();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return bad(format!("training key `{key}` must be non-empty [A-Za-z0-9_.-]"));
            }
            if !keys.insert(key.clone()) {
                return bad(format!("duplicate training key `{key}`"));
            }
            if let Some(p) = &t.teacher {
                if !p.exists() {
                    return bad(format!("teacher checkpoint {} does not exist", p.display()));
                }
            }
        }
        let needs_teacher = self.train.iter().any(|t| matches!(t.method, TrainMethod::Igd { .. }) && t.teacher.is_none());
        if needs_teacher {
            let key = self.teacher_key().ok_or_else(|| Error::Config("igd entries need a teacher".into()))?;
            match self.train.iter().find(|t| t.key() == key) {
                None => return bad(format!("teacher `{key}` is not a training key")),
                Some(t) if matches!(t.method, TrainMethod::Igd { .. }) => {
                    return bad(format!("teacher `{key}` must not itself be an igd entry"))
                }
                _ => {}
            }
        }
        if self.gini.block == 0 {
            return bad("gini block must be positive".into());
        }
        for m in &self.gini.maps {
            if !m.exists() {
                return bad(format!("attribution map {} does not exist", m.display()));
            }
        }
        self.evaluate.pgd.validate()?;
        if let Some(a) = &self.attacks {
            check_fractions(&a.k_fractions)?;
            if let Some(ioa) = &a.ioa {
                if ioa.n == 0 || ioa.r == 0 {
                    return bad("ioa n and r must be positive".into());
                }
            }
        }
        if let Some(c) = &self.corruptions {
            for &s in &c.severities {
                if !(1..=5).contains(&s) {
                    return bad(format!("severity must be 1..=5, got {s}"));
                }
            }
        }
        if let Some(t) = &self.theory {
            check_fractions(&t.k_fractions)?;
            if t.draws == 0 || t.samples == 0 {
                return bad("theory draws and samples must be positive".into());
            }
        }
        let model_stage = self.attacks.is_some() || self.corruptions.is_some() || self.theory.is_some();
        if model_stage && self.train.is_empty() {
            return bad("attack, corruption and theory stages need training entries".into());
        }
        Ok(())
    }

    pub fn teacher_key(&self) -> Option<String> {
        self.teacher
            .clone()
            .or_else(|| self.train.iter().find(|t| t.method == TrainMethod::Standard).map(TrainConfig::key))
    }

    /// Hex SHA-256 (16 chars) of the config with seed and output directory
    /// neutralized, so it identifies the experiment independent of where it runs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex_digest(&bytes)[..16].to_string()
    }
}

fn check_fractions(f: &[f64]) -> Result<()> {
    if f.is_empty() || f.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Config(format!("k fractions must be in (0, 1], got {f:?}")));
    }
    Ok(())
}
