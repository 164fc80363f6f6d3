//! Experiment orchestration behind the `gradeq` CLI: train (with a checkpoint
//! cache), attribute, score, attack and emit tables.
//!
//! Outputs under `out_dir` depend only on the config and seed. Wall-clock
//! information goes to `run.log` alone.

mod config;
mod report;
pub mod svg;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::*;
pub use report::*;

use crate::attacks::{error_rate, k_grid, sample_rng, AttackKind, AttackSpec, Color};
use crate::attribution::{attribute, saliency_batch, AttributionMap, Method};
use crate::data::{ImageBatch, Splits};
use crate::error::{Error, Result};
use crate::inequality::{gini, regional_gini, GiniReport};
use crate::models::{argmax, hex_digest, logits, Checkpoint, ModelSpec, Network, ScoreModel};
use crate::theory::{linearized_weights, sweep_mask_stats, Selection};
use crate::training::{evaluate, train, write_record, TrainMethod};

pub const THREADS_ENV: &str = "GRADEQ_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Evaluate,
    Attack,
    Gini,
    Theory,
    Corrupt,
    /// Everything the config enables.
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Attack => "attack",
            Stage::Gini => "gini",
            Stage::Theory => "theory",
            Stage::Corrupt => "corrupt",
            Stage::Report => "report",
        }
    }
}

/// Mean softmax probability of the true class over samples whose argmax
/// (lowest index on ties) is correct. `mean` is NaN when none are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub mean: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn confidence_stats(model: &dyn ScoreModel, batch: &ImageBatch) -> Result<Confidence> {
    let l = logits(model, &batch.pixels)?;
    let c = model.classes();
    let mut sum = 0.0;
    let mut correct = 0;
    for (row, &y) in l.data().chunks(c).zip(&batch.labels) {
        if argmax(row) != y {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        sum += (row[y] - m).exp() / z;
        correct += 1;
    }
    let mean = if correct == 0 { f64::NAN } else { sum / correct as f64 };
    Ok(Confidence { mean, correct, total: batch.len() })
}

/// Thread pool sized by `GRADEQ_THREADS` (all cores when unset or 0).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Trained {
    key: String,
    network: Network,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    out: PathBuf,
    bundle: ReportBundle,
    log: Option<std::fs::File>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage { stage: name.to_string(), source: Box::new(e) },
    })
}

fn first(batch: &ImageBatch, n: Option<usize>) -> ImageBatch {
    let n = n.unwrap_or(batch.len()).min(batch.len());
    batch.select(&(0..n).collect::<Vec<_>>())
}

/// Loads, validates and runs `stage`, applying CLI overrides.
pub fn run_path(path: impl AsRef<Path>, stage: Stage, seed: Option<u64>, out: Option<PathBuf>) -> Result<ReportBundle> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    run(&cfg, stage)
}

/// Runs `stage` and writes its tables to `cfg.out_dir`. Tables finished before
/// a failing stage stay on disk.
pub fn run(cfg: &ExperimentConfig, stage_kind: Stage) -> Result<ReportBundle> {
    cfg.validate()?;
    let needs = |stages: &[Stage]| stages.contains(&stage_kind) || stage_kind == Stage::Report;
    if stage_kind == Stage::Attack && cfg.attacks.is_none() {
        return Err(Error::Config("`attack` needs an `attacks` section".into()));
    }
    if stage_kind == Stage::Corrupt && cfg.corruptions.is_none() {
        return Err(Error::Config("`corrupt` needs a `corruptions` section".into()));
    }
    if stage_kind == Stage::Theory && cfg.theory.is_none() {
        return Err(Error::Config("`theory` needs a `theory` section".into()));
    }
    let models_needed = stage_kind != Stage::Gini || !cfg.train.is_empty();
    if models_needed && cfg.train.is_empty() {
        return Err(Error::Config(format!("`{}` needs training entries", stage_kind.name())));
    }

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("run.log");
    let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let hash = cfg.hash();
    let mut run = Run {
        cfg,
        hash: hash.clone(),
        out: cfg.out_dir.clone(),
        bundle: ReportBundle { config_hash: hash, seed: cfg.seed, ..Default::default() },
        log: Some(log),
    };
    let mut canonical = serde_json::to_vec_pretty(cfg)?;
    canonical.push(b'\n');
    write_file(&run.out.join("config.json"), &canonical)?;
    run.note(&format!("{} config {} seed {}", stage_kind.name(), run.hash, cfg.seed));

    let pool = thread_pool()?;
    pool.install(|| -> Result<()> {
        let maps_wanted = needs(&[Stage::Gini, Stage::Evaluate]);
        if maps_wanted && !cfg.gini.maps.is_empty() {
            let rows = stage("gini", run.map_rows())?;
            run.bundle.gini.extend(rows);
            run.flush()?;
        }
        if !models_needed {
            return Ok(());
        }
        let splits = stage("data", cfg.dataset.as_ref().expect("validated").load())?;
        let models = stage("train", run.train_all(&splits))?;
        run.flush()?;
        if needs(&[Stage::Gini, Stage::Evaluate]) {
            let t = Instant::now();
            let (g, l1, conf) = stage("evaluate", run.evaluate_models(&models, &splits.test))?;
            run.bundle.gini.extend(g);
            for w in l1_warnings(cfg, &l1) {
                run.note(&w);
            }
            if needs(&[Stage::Evaluate]) {
                run.bundle.l1 = l1;
                run.bundle.confidence = conf;
            }
            run.flush()?;
            run.note(&format!("evaluate done in {:.1}s", t.elapsed().as_secs_f64()));
        }
        if let (true, Some(plan)) = (needs(&[Stage::Attack]), &cfg.attacks) {
            let t = Instant::now();
            let (curves, ioa) = stage("attack", run.attacks(plan, &models, &splits.test))?;
            run.bundle.curves = curves;
            run.bundle.ioa = ioa;
            run.flush()?;
            run.note(&format!("attack done in {:.1}s", t.elapsed().as_secs_f64()));
        }
        if let (true, Some(plan)) = (needs(&[Stage::Corrupt]), &cfg.corruptions) {
            let t = Instant::now();
            run.bundle.corruption = stage("corrupt", run.corruptions(plan, &models, &splits.test))?;
            run.flush()?;
            run.note(&format!("corrupt done in {:.1}s", t.elapsed().as_secs_f64()));
        }
        if let (true, Some(plan)) = (needs(&[Stage::Theory]), &cfg.theory) {
            let t = Instant::now();
            run.bundle.mask_stats = stage("theory", run.theory(plan, &models, &splits.test))?;
            run.flush()?;
            run.note(&format!("theory done in {:.1}s", t.elapsed().as_secs_f64()));
        }
        Ok(())
    })?;
    run.flush()?;
    run.note("finished");
    Ok(run.bundle)
}

/// IGD students whose mean input-gradient L1 is not within a factor of 2 of
/// the first PGDAT model. Reported, never enforced.
fn l1_warnings(cfg: &ExperimentConfig, rows: &[L1Row]) -> Vec<String> {
    let method = |key: &str| cfg.train.iter().find(|t| t.key() == key).map(|t| t.method);
    let Some(base) = rows.iter().find(|r| method(&r.model) == Some(TrainMethod::Pgdat)) else {
        return Vec::new();
    };
    rows.iter()
        .filter(|r| matches!(method(&r.model), Some(TrainMethod::Igd { .. })))
        .filter(|r| !(r.mean_l1 <= 2.0 * base.mean_l1 && 2.0 * r.mean_l1 >= base.mean_l1))
        .map(|r| format!("warning: {} gradient L1 {:.4} vs {} {:.4} exceeds a factor of 2", r.model, r.mean_l1, base.model, base.mean_l1))
        .collect()
}

impl Run<'_> {
    fn note(&mut self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        if let Some(f) = &mut self.log {
            let _ = writeln!(f, "{ts:.3} {msg}");
        }
    }

    fn flush(&self) -> Result<()> {
        self.bundle.write(&self.out)
    }

    fn map_rows(&self) -> Result<Vec<GiniRow>> {
        let g = &self.cfg.gini;
        g.maps
            .iter()
            .map(|p| {
                let map = AttributionMap::import(p)?;
                let rep = GiniReport::from_map(&map.reduced, g.block, map.method.name())?;
                Ok(GiniRow {
                    config_hash: self.hash.clone(),
                    seed: self.cfg.seed,
                    model: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                    attribution: rep.method,
                    clean_acc: None,
                    adv_acc: None,
                    global_gini: rep.global_gini,
                    regional_gini: rep.regional_gini,
                    block: rep.block,
                    maps: 1,
                })
            })
            .collect()
    }

    fn train_all(&mut self, splits: &Splits) -> Result<Vec<Trained>> {
        let cfg = self.cfg;
        let model = cfg.model.as_ref().expect("validated");
        let dataset = cfg.dataset.as_ref().expect("validated");
        let spec = ModelSpec {
            architecture: model.architecture.clone(),
            activation: model.activation,
            input_shape: splits.train.image_shape().to_vec(),
            classes: splits.train.classes,
            normalization: dataset.normalize.then_some((splits.train.mean, splits.train.std)),
        };
        let init = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let ckpt_dir = self.out.join("checkpoints");
        let train_dir = self.out.join("train");
        for d in [&ckpt_dir, &train_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }

        let is_igd = |i: &usize| matches!(cfg.train[*i].method, TrainMethod::Igd { .. });
        let (students, others): (Vec<usize>, Vec<usize>) = (0..cfg.train.len()).partition(is_igd);
        let mut done: Vec<Option<(TrainRow, Network, Option<String>, bool)>> = vec![None; cfg.train.len()];

        let one = |i: usize, teacher: Option<(&Network, String)>| -> Result<(TrainRow, Network, Option<String>, bool)> {
            let mut entry = cfg.train[i].clone();
            entry.seed = cfg.seed;
            let key = entry.key();
            let mut hashed = entry.clone();
            hashed.teacher = None;
            let ident = serde_json::json!({
                "dataset": dataset,
                "model": model,
                "train": hashed,
                "teacher": teacher.as_ref().map(|t| t.1.clone()),
                "seed": cfg.seed,
            });
            let digest = &hex_digest(&serde_json::to_vec(&ident)?)[..16];
            let file = format!("{key}-{digest}.igdc");
            let path = ckpt_dir.join(&file);
            let (ckpt, diverged, cached) = if path.exists() {
                (Checkpoint::load(&path)?, None, true)
            } else {
                let outcome = train(&entry, init.clone(), splits, teacher.as_ref().map(|t| t.0))?;
                outcome.best.save(&path)?;
                write_record(train_dir.join(format!("{key}.csv")), &outcome.record)?;
                (outcome.best, outcome.diverged, false)
            };
            let row = TrainRow {
                config_hash: String::new(),
                seed: cfg.seed,
                model: key,
                method: entry.method.name().to_string(),
                lambda: entry.method.lambda(),
                best_epoch: ckpt.meta.epoch,
                checkpoint: file,
            };
            Ok((row, ckpt.network, diverged, cached))
        };

        let first_pass: Vec<_> = others.par_iter().map(|&i| one(i, None)).collect::<Result<_>>()?;
        for (i, r) in others.iter().zip(first_pass) {
            done[*i] = Some(r);
        }
        let fallback = match cfg.teacher_key() {
            Some(k) => cfg.train.iter().position(|t| t.key() == k),
            None => None,
        };
        let external: Vec<Option<(Network, String)>> = students
            .iter()
            .map(|&i| match &cfg.train[i].teacher {
                Some(p) => {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    Ok(Some((Checkpoint::from_bytes(&bytes)?.network, hex_digest(&bytes))))
                }
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        let fallback_teacher = match fallback.and_then(|i| done[i].as_ref()) {
            Some((row, net, ..)) => Some((net.clone(), checkpoint_digest(&ckpt_dir.join(&row.checkpoint))?)),
            None => None,
        };
        let second_pass: Vec<_> = students
            .par_iter()
            .zip(&external)
            .map(|(&i, ext)| {
                let t = ext.as_ref().or(fallback_teacher.as_ref()).expect("validated teacher");
                one(i, Some((&t.0, t.1.clone())))
            })
            .collect::<Result<_>>()?;
        for (i, r) in students.iter().zip(second_pass) {
            done[*i] = Some(r);
        }

        let mut out = Vec::with_capacity(done.len());
        for entry in done {
            let (mut row, network, diverged, cached) = entry.expect("every entry trained");
            row.config_hash = self.hash.clone();
            let how = if cached { "cached" } else { "trained" };
            self.note(&format!("{} {how} -> {}", row.model, row.checkpoint));
            if let Some(d) = diverged {
                self.note(&format!("{} stopped early: {d}", row.model));
            }
            out.push(Trained { key: row.model.clone(), network });
            self.bundle.training.push(row);
        }
        Ok(out)
    }

    fn evaluate_models(
        &self,
        models: &[Trained],
        test: &ImageBatch,
    ) -> Result<(Vec<GiniRow>, Vec<L1Row>, Vec<ConfidenceRow>)> {
        let cfg = self.cfg;
        let batch = first(test, cfg.evaluate.samples);
        let rows: Vec<_> = models
            .par_iter()
            .map(|m| -> Result<_> {
                let ev = evaluate(&m.network, &batch, &cfg.evaluate.pgd, cfg.seed)?;
                let (g, rg, maps) = map_ginis(&m.network, &batch, cfg.gini.method, cfg.gini.block, cfg.seed)?;
                let conf = confidence_stats(&m.network, &batch)?;
                let gini = GiniRow {
                    config_hash: self.hash.clone(),
                    seed: cfg.seed,
                    model: m.key.clone(),
                    attribution: cfg.gini.method.name().to_string(),
                    clean_acc: Some(ev.clean_acc),
                    adv_acc: Some(ev.pgd_acc),
                    global_gini: g,
                    regional_gini: rg,
                    block: cfg.gini.block,
                    maps,
                };
                let l1 = L1Row {
                    config_hash: self.hash.clone(),
                    seed: cfg.seed,
                    model: m.key.clone(),
                    mean_l1: ev.mean_l1,
                    samples: batch.len(),
                };
                let conf = ConfidenceRow {
                    config_hash: self.hash.clone(),
                    seed: cfg.seed,
                    model: m.key.clone(),
                    confidence: conf.mean,
                    correct: conf.correct,
                    samples: conf.total,
                };
                Ok((gini, l1, conf))
            })
            .collect::<Result<_>>()?;
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for (g, l, c) in rows {
            out.0.push(g);
            out.1.push(l);
            out.2.push(c);
        }
        Ok(out)
    }

    /// Runs `specs` over the jointly-correct subset, one job per spec.
    fn error_rates(
        &self,
        models: &[Trained],
        batch: &ImageBatch,
        specs: &[AttackSpec],
    ) -> Result<Vec<crate::attacks::ErrorRates>> {
        specs
            .par_iter()
            .map(|spec| {
                let refs: Vec<&dyn ScoreModel> = models.iter().map(|m| &m.network as &dyn ScoreModel).collect();
                error_rate(&refs, spec, batch)
            })
            .collect()
    }

    fn attacks(&self, plan: &AttackPlan, models: &[Trained], test: &ImageBatch) -> Result<(Vec<CurveRow>, Vec<IoaRow>)> {
        let seed = self.cfg.seed;
        let batch = first(test, plan.samples);
        let shape = batch.image_shape();
        let pixels = shape[1] * shape[2];
        let ks = k_grid(pixels, &plan.k_fractions);
        let mut jobs = Vec::new();
        for &curve in &plan.curves {
            for &k in &ks {
                let kind = match curve {
                    CurveAttack::Ina1 => AttackKind::Ina1 { k },
                    CurveAttack::Ina2 => AttackKind::Ina2 { k },
                    CurveAttack::Rn => AttackKind::Rn { k },
                };
                jobs.push(AttackSpec { attribution: plan.attribution, ..AttackSpec::new(kind, seed) });
            }
        }
        let mut curves = Vec::new();
        for (spec, er) in jobs.iter().zip(self.error_rates(models, &batch, &jobs)?) {
            let k: usize = match spec.attack {
                AttackKind::Ina1 { k } | AttackKind::Ina2 { k } | AttackKind::Rn { k } => k,
                _ => unreachable!("curve attacks only"),
            };
            for (m, o) in models.iter().zip(&er.outcomes) {
                curves.push(CurveRow {
                    config_hash: self.hash.clone(),
                    seed,
                    model: m.key.clone(),
                    attack: spec.attack.name().to_string(),
                    k,
                    k_fraction: k as f64 / pixels as f64,
                    error_rate: o.error_rate(),
                    evaluated: o.evaluated,
                });
            }
        }
        let mut ioa = Vec::new();
        if let Some(p) = &plan.ioa {
            let specs: Vec<AttackSpec> = p
                .colors
                .iter()
                .map(|&color| AttackSpec {
                    attribution: plan.attribution,
                    ..AttackSpec::new(AttackKind::Ioa { n: p.n, r: p.r, color }, seed)
                })
                .collect();
            for (color, er) in p.colors.iter().zip(self.error_rates(models, &batch, &specs)?) {
                for (m, o) in models.iter().zip(&er.outcomes) {
                    let steps: usize = o.ioa_traces.iter().map(Vec::len).sum();
                    ioa.push(IoaRow {
                        config_hash: self.hash.clone(),
                        seed,
                        model: m.key.clone(),
                        color: color_name(*color).to_string(),
                        n: p.n,
                        r: p.r,
                        error_rate: o.error_rate(),
                        evaluated: o.evaluated,
                        mean_steps: steps as f64 / o.ioa_traces.len().max(1) as f64,
                        flagged: o.flagged.iter().filter(|&&f| f).count(),
                    });
                }
            }
        }
        Ok((curves, ioa))
    }

    fn corruptions(&self, plan: &CorruptionPlan, models: &[Trained], test: &ImageBatch) -> Result<Vec<CorruptionRow>> {
        let seed = self.cfg.seed;
        let batch = first(test, plan.samples);
        let mut specs = Vec::new();
        for &corruption in &plan.kinds {
            for &severity in &plan.severities {
                let mut s = AttackSpec::new(AttackKind::Corrupt { corruption, severity }, seed);
                s.severities = plan.table.clone();
                specs.push((corruption, severity, s));
            }
        }
        let just: Vec<AttackSpec> = specs.iter().map(|s| s.2.clone()).collect();
        let mut rows = Vec::new();
        for ((corruption, severity, _), er) in specs.iter().zip(self.error_rates(models, &batch, &just)?) {
            for (m, o) in models.iter().zip(&er.outcomes) {
                rows.push(CorruptionRow {
                    config_hash: self.hash.clone(),
                    seed,
                    model: m.key.clone(),
                    corruption: serde_json::to_value(corruption)?.as_str().unwrap_or_default().to_string(),
                    severity: *severity,
                    parameter: plan.table.parameter(*corruption, *severity)?,
                    error_rate: o.error_rate(),
                    evaluated: o.evaluated,
                });
            }
        }
        Ok(rows)
    }

    fn theory(&self, plan: &TheoryPlan, models: &[Trained], test: &ImageBatch) -> Result<Vec<MaskStatRow>> {
        let seed = self.cfg.seed;
        let batch = first(test, Some(plan.samples));
        let shape = batch.image_shape();
        let ks = k_grid(shape[1] * shape[2], &plan.k_fractions);
        let per_model: Vec<Vec<MaskStatRow>> = models
            .par_iter()
            .enumerate()
            .map(|(mi, m)| -> Result<_> {
                let weights = linearized_weights(&m.network, &batch.pixels, &batch.labels)?;
                let mut rows = Vec::new();
                for (si, &sel) in plan.selections.iter().enumerate() {
                    let mut rng = sample_rng(seed, mi * plan.selections.len() + si);
                    for p in sweep_mask_stats(&weights, &ks, sel, plan.draws, &mut rng)? {
                        for (stat, est) in [("sum_sq", p.sum_sq), ("sum_squared", p.sum_squared)] {
                            rows.push(MaskStatRow {
                                config_hash: self.hash.clone(),
                                seed,
                                model: m.key.clone(),
                                k: p.k,
                                statistic: stat.to_string(),
                                mean: est.mean,
                                stderr: est.stderr,
                                selection: selection_name(sel).to_string(),
                            });
                        }
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(per_model.into_iter().flatten().collect())
    }
}

fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Mean global and regional Gini over non-zero true-class maps, and how many
/// maps counted.
fn map_ginis(net: &Network, batch: &ImageBatch, method: Method, block: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let maps = if method == Method::Saliency {
        saliency_batch(net, &batch.pixels, &batch.labels)?
    } else {
        (0..batch.len())
            .map(|i| attribute(net, &batch.image(i), batch.labels[i], method, &mut sample_rng(seed, i)))
            .collect::<Result<_>>()?
    };
    let (mut g, mut rg, mut n) = (0.0, 0.0, 0usize);
    for m in maps.iter().filter(|m| !m.is_zero()) {
        g += gini(m.reduced.data())?;
        rg += regional_gini(&m.reduced, block)?;
        n += 1;
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN, 0));
    }
    Ok((g / n as f64, rg / n as f64, n))
}

fn color_name(c: Color) -> &'static str {
    match c {
        Color::Black => "black",
        Color::Gray => "gray",
        Color::White => "white",
    }
}

fn selection_name(s: Selection) -> &'static str {
    match s {
        Selection::Random => "random",
        Selection::AttributionRanked => "attribution_ranked",
    }
}
