//! Standard, PGD adversarial, PGD+CutOut and input-gradient-distillation
//! training with SGD, momentum, weight decay and plateau learning-rate decay.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, pgd_from, pgd_start, sample_rng, PgdConfig};
use crate::attribution::saliency_batch;
use crate::autodiff::Graph;
use crate::data::{cutout, ImageBatch, Splits};
use crate::error::{Error, Result};
use crate::inequality::gini;
use crate::models::{input_gradients, predict, Checkpoint, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TrainMethod {
    Standard,
    Pgdat,
    PgdatCutout { hole: usize },
    Igd { lambda: f64 },
}

impl TrainMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMethod::Standard => "standard",
            TrainMethod::Pgdat => "pgdat",
            TrainMethod::PgdatCutout { .. } => "pgdat_cutout",
            TrainMethod::Igd { .. } => "igd",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            TrainMethod::Igd { lambda } => *lambda,
            _ => 0.0,
        }
    }

    fn adversarial(&self) -> bool {
        !matches!(self, TrainMethod::Standard)
    }
}

/// Which class score the input gradients in the distillation term differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScore {
    #[default]
    Logit,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Key used for outputs; defaults to [`TrainConfig::key`].
    #[serde(default)]
    pub name: Option<String>,
    pub method: TrainMethod,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "PgdConfig::standard")]
    pub pgd: PgdConfig,
    /// Attack used for model selection; defaults to `pgd`.
    #[serde(default)]
    pub eval_pgd: Option<PgdConfig>,
    #[serde(default = "default_plateau")]
    pub plateau: Plateau,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint of the frozen standard model; required for `igd`.
    #[serde(default)]
    pub teacher: Option<std::path::PathBuf>,
    #[serde(default)]
    pub gradient_score: GradientScore,
}

fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_plateau() -> Plateau {
    Plateau { factor: 0.1, patience: 3 }
}

impl TrainConfig {
    pub fn new(method: TrainMethod, epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            name: None,
            method,
            epochs,
            batch_size: default_batch(),
            lr,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            pgd: PgdConfig::standard(),
            eval_pgd: None,
            plateau: default_plateau(),
            seed,
            teacher: None,
            gradient_score: GradientScore::Logit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor <= 1.0) {
            return bad(format!("plateau factor must be in (0, 1], got {}", self.plateau.factor));
        }
        if let TrainMethod::Igd { lambda } = self.method {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return bad(format!("lambda must be >= 0, got {lambda}"));
            }
        }
        if let TrainMethod::PgdatCutout { hole } = self.method {
            if hole == 0 {
                return bad("cutout hole must be positive".into());
            }
        }
        self.pgd.validate()?;
        if let Some(e) = &self.eval_pgd {
            e.validate()?;
        }
        Ok(())
    }

    /// `name`, or the method with its coefficient, e.g. `igd_l2`.
    pub fn key(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.method {
            TrainMethod::Igd { lambda } => format!("igd_l{lambda}"),
            m => m.name().to_string(),
        }
    }

    pub fn selection_attack(&self) -> PgdConfig {
        self.eval_pgd.unwrap_or(self.pgd)
    }
}

/// Loss value and its parameter gradient.
#[derive(Debug, Clone)]
pub struct IgdLoss {
    pub ce: f64,
    /// Batch mean of the per-sample cosine between student and teacher input gradients.
    pub cosine: f64,
    pub total: f64,
    /// Samples whose student or teacher gradient had zero norm.
    pub degenerate: usize,
    pub grads: Vec<Tensor>,
}

/// `CE(student(x_adv), y) - λ · mean_i cos(∂f_y/∂x (x_i), teacher_grad_i)`.
/// `teacher_grad` is a constant `[N, C, H, W]`; with `λ = 0` the cosine branch is
/// skipped and the gradient is that of the cross-entropy alone.
pub fn igd_loss(
    student: &Network,
    teacher_grad: Option<&Tensor>,
    x: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    lambda: f64,
    score: GradientScore,
) -> Result<IgdLoss> {
    let mut g = Graph::new();
    let params = student.register(&mut g)?;
    let xa = g.input(x_adv.clone())?;
    let la = student.record_with(&mut g, xa, &params)?;
    let ce = g.cross_entropy(la, y)?;
    if lambda == 0.0 || teacher_grad.is_none() {
        let ce_v = g.value(ce).item();
        let grads = g.backward(ce, &params)?;
        return Ok(IgdLoss { ce: ce_v, cosine: 0.0, total: ce_v, degenerate: 0, grads });
    }
    let teacher_grad = teacher_grad.expect("checked above");
    if teacher_grad.shape() != x.shape() {
        return Err(Error::Shape(format!("teacher gradient {:?} vs input {:?}", teacher_grad.shape(), x.shape())));
    }
    let n = x.shape()[0];
    let d = x.len() / n;
    let xc = g.input(x.clone())?;
    let lc = student.record_with(&mut g, xc, &params)?;
    let scores = match score {
        GradientScore::Logit => lc,
        GradientScore::Softmax => g.softmax_rows(lc)?,
    };
    let picked = g.select_cols(scores, y)?;
    let s = g.sum(picked)?;
    let gx = g.grad(s, &[xc])?[0];
    let gx = g.reshape(gx, &[n, d])?;
    let t = g.constant(teacher_grad.clone().reshape(&[n, d])?)?;
    let (cos, degenerate) = g.cosine_rows(gx, t)?;
    let cos_mean = g.mean(cos)?;
    let penalty = g.scale(cos_mean, lambda)?;
    let total = g.sub(ce, penalty)?;
    let (ce_v, cos_v, total_v) = (g.value(ce).item(), g.value(cos_mean).item(), g.value(total).item());
    let grads = g.backward(total, &params)?;
    Ok(IgdLoss { ce: ce_v, cosine: cos_v, total: total_v, degenerate, grads })
}

/// Teacher input gradients of the labelled score, detached.
pub fn teacher_gradients(teacher: &Network, x: &Tensor, y: &[usize], score: GradientScore) -> Result<Tensor> {
    match score {
        GradientScore::Logit => input_gradients(teacher, x, y),
        GradientScore::Softmax => {
            let mut g = Graph::new();
            let xi = g.input(x.clone())?;
            let l = teacher.record(&mut g, xi)?.logits;
            let p = g.softmax_rows(l)?;
            let picked = g.select_cols(p, y)?;
            let s = g.sum(picked)?;
            Ok(g.backward(s, &[xi])?.remove(0))
        }
    }
}

/// One row per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_cosine: f64,
    pub train_total: f64,
    pub val_clean_acc: f64,
    pub val_pgd_acc: f64,
    pub val_gini: f64,
    /// Validation saliency L1 norm, mean over samples.
    pub val_saliency_l1: f64,
    pub degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the selected epoch (epoch 0 = initialization).
    pub best: Checkpoint,
    pub last: Network,
    pub record: Vec<EpochRecord>,
    /// Set when a non-finite loss stopped training early.
    pub diverged: Option<String>,
}

/// Train a freshly initialized network. `teacher` is required for `igd` and
/// never modified.
pub fn train(config: &TrainConfig, init: Network, splits: &Splits, teacher: Option<&Network>) -> Result<TrainOutcome> {
    config.validate()?;
    if matches!(config.method, TrainMethod::Igd { .. }) && teacher.is_none() {
        return Err(Error::Config("igd training requires a teacher".into()));
    }
    if let Some(t) = teacher {
        if t.spec().input_shape != init.spec().input_shape || t.spec().classes != init.spec().classes {
            return Err(Error::Config("teacher and student disagree on input shape or classes".into()));
        }
    }
    let train = &splits.train;
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let method = config.method;
    let lambda = method.lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = init;
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut lr = config.lr;
    let mut best = Checkpoint::new(net.clone(), method.name(), lambda, 0, config.seed);
    let mut best_score = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut record = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut cos_sum, mut total_sum, mut degenerate, mut seen) = (0.0, 0.0, 0.0, 0, 0);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = train.select(chunk);
            if let TrainMethod::PgdatCutout { hole } = method {
                batch = cutout(&batch, hole, &mut rng)?;
            }
            let x_adv = if method.adversarial() {
                pgd(&net, &batch.pixels, &batch.labels, &config.pgd, &mut rng)?.x_adv
            } else {
                batch.pixels.clone()
            };
            let t_grad = match (teacher, lambda > 0.0) {
                (Some(t), true) => Some(teacher_gradients(t, &batch.pixels, &batch.labels, config.gradient_score)?),
                _ => None,
            };
            let loss = igd_loss(&net, t_grad.as_ref(), &batch.pixels, &x_adv, &batch.labels, lambda, config.gradient_score)?;
            if !loss.total.is_finite() || loss.grads.iter().any(|g| !g.is_finite()) {
                return Ok(TrainOutcome {
                    best,
                    last: net,
                    record,
                    diverged: Some(format!("non-finite loss at epoch {epoch}")),
                });
            }
            let b = chunk.len() as f64;
            ce_sum += loss.ce * b;
            cos_sum += loss.cosine * b;
            total_sum += loss.total * b;
            degenerate += loss.degenerate;
            seen += chunk.len();
            sgd_step(&mut net, &mut velocity, &loss.grads, lr, config.momentum, config.weight_decay);
        }
        let eval = evaluate(&net, &splits.val, &config.selection_attack(), config.seed)?;
        let seen = seen as f64;
        record.push(EpochRecord {
            epoch,
            lr,
            train_ce: ce_sum / seen,
            train_cosine: cos_sum / seen,
            train_total: total_sum / seen,
            val_clean_acc: eval.clean_acc,
            val_pgd_acc: eval.pgd_acc,
            val_gini: eval.mean_gini,
            val_saliency_l1: eval.mean_l1,
            degenerate,
        });
        let score = if method.adversarial() { eval.pgd_acc } else { eval.clean_acc };
        if score > best_score {
            best_score = score;
            best = Checkpoint::new(net.clone(), method.name(), lambda, epoch, config.seed);
            stale = 0;
        } else {
            stale += 1;
            if stale > config.plateau.patience {
                lr *= config.plateau.factor;
                stale = 0;
            }
        }
    }
    Ok(TrainOutcome { best, last: net, record, diverged: None })
}

/// `v = μv + (g + wd·θ)`, `θ = round_f32(θ - lr·v)`.
fn sgd_step(net: &mut Network, velocity: &mut [Tensor], grads: &[Tensor], lr: f64, momentum: f64, wd: f64) {
    for ((p, v), g) in net.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
        p.round_to_f32();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub clean_acc: f64,
    pub pgd_acc: f64,
    /// Mean Gini of per-sample saliency maps; zero maps are skipped.
    pub mean_gini: f64,
    pub mean_l1: f64,
}

/// Clean and PGD accuracy plus saliency statistics. PGD starts are seeded per
/// sample so repeated evaluations are comparable.
pub fn evaluate(net: &Network, batch: &ImageBatch, attack: &PgdConfig, seed: u64) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    let n = batch.len() as f64;
    let acc = |preds: Vec<usize>| preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count() as f64 / n;
    let clean_acc = acc(predict(net, &batch.pixels)?);
    let starts: Vec<Tensor> = (0..batch.len())
        .map(|i| pgd_start(attack, batch.image_shape(), &mut sample_rng(seed, i)))
        .collect();
    let adv = pgd_from(net, &batch.pixels, &batch.labels, attack, &Tensor::stack(&starts)?, |_, _| {})?;
    let pgd_acc = acc(predict(net, &adv.x_adv)?);
    let (mean_gini, mean_l1) = saliency_summary(net, batch)?;
    Ok(Evaluation { clean_acc, pgd_acc, mean_gini, mean_l1 })
}

/// Mean Gini and mean L1 norm of true-class saliency over a batch.
pub fn saliency_summary(net: &Network, batch: &ImageBatch) -> Result<(f64, f64)> {
    let maps = saliency_batch(net, &batch.pixels, &batch.labels)?;
    let mut ginis = Vec::new();
    let mut l1 = 0.0;
    for m in &maps {
        l1 += m.values.l1_norm();
        if !m.is_zero() {
            ginis.push(gini(m.reduced.data())?);
        }
    }
    let mean_gini = if ginis.is_empty() { f64::NAN } else { ginis.iter().sum::<f64>() / ginis.len() as f64 };
    Ok((mean_gini, l1 / maps.len() as f64))
}

pub fn write_record(path: impl AsRef<Path>, record: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in record {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BlobConfig, DataSource, DatasetConfig};
    use crate::models::{Activation, ModelSpec};

    fn tiny_splits() -> Splits {
        let mut blobs = BlobConfig::new(8, 2, 0, 5);
        blobs.blob_sigma = 1.5;
        DatasetConfig {
            source: DataSource::SyntheticBlobs(blobs),
            train: 48,
            val: 16,
            test: 16,
            classes: None,
            normalize: false,
        }
        .load()
        .unwrap()
    }

    fn tiny_net(seed: u64) -> Network {
        let spec = ModelSpec::mlp(&[1, 8, 8], &[8], 2, Activation::Softplus);
        Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let net = tiny_net(0);
        let cfg = TrainConfig::new(TrainMethod::Standard, 0, 0.1, 1);
        let out = train(&cfg, net.clone(), &tiny_splits(), None).unwrap();
        assert!(out.record.is_empty());
        assert_eq!(out.best.network, net);
        assert_eq!(out.best.meta.epoch, 0);
    }

    #[test]
    fn identical_student_and_teacher_give_unit_cosine() {
        let net = tiny_net(1);
        let s = tiny_splits();
        let x = s.train.select(&[0, 1, 2, 3]);
        let tg = teacher_gradients(&net, &x.pixels, &x.labels, GradientScore::Logit).unwrap();
        let l = igd_loss(&net, Some(&tg), &x.pixels, &x.pixels, &x.labels, 2.0, GradientScore::Logit).unwrap();
        assert!((l.cosine - 1.0).abs() < 1e-12);
        assert!((l.total - (l.ce - 2.0)).abs() < 1e-12);
        let scaled = tg.map(|v| 3.5 * v);
        let l2 = igd_loss(&net, Some(&scaled), &x.pixels, &x.pixels, &x.labels, 2.0, GradientScore::Logit).unwrap();
        assert!((l2.cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn igd_without_teacher_is_rejected() {
        let cfg = TrainConfig::new(TrainMethod::Igd { lambda: 1.0 }, 1, 0.1, 0);
        assert!(matches!(train(&cfg, tiny_net(0), &tiny_splits(), None), Err(Error::Config(_))));
    }
}
