//! Perturbation attacks and the joint-correct error-rate protocol.
//!
//! All attacks work in pixel space (`[0, 1]`); models normalize internally.
//! Per-sample randomness comes from [`sample_seed`], so a sample sees the same
//! noise regardless of batch composition or which model is under attack.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionMap, Method};
use crate::autodiff::Graph;
use crate::data::{cutout_at, ImageBatch};
use crate::error::{Error, Result};
use crate::models::{predict, ScoreModel};
use crate::tensor::Tensor;

/// Mixes a global seed with a sample index (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, index))
}

// ---------------------------------------------------------------------------
// PGD

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    #[serde(default = "yes")]
    pub random_start: bool,
}

fn yes() -> bool {
    true
}

impl PgdConfig {
    /// `eps = 8/255`, `step = 2/255`, 10 iterations, random start.
    pub fn standard() -> Self {
        Self { eps: 8.0 / 255.0, step: 2.0 / 255.0, iters: 10, random_start: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.step >= 0.0) || !self.eps.is_finite() || !self.step.is_finite() {
            return Err(Error::Config(format!("pgd eps/step must be finite and >= 0, got {}/{}", self.eps, self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub x_adv: Tensor,
    /// Samples whose gradient went non-finite; their iterate stopped moving.
    pub flagged: Vec<bool>,
}

/// Uniform start noise in `[-eps, eps]`, or zeros without a random start.
pub fn pgd_start(cfg: &PgdConfig, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if cfg.random_start && cfg.eps > 0.0 {
        for v in t.data_mut() {
            *v = rng.random_range(-cfg.eps..=cfg.eps);
        }
    }
    t
}

/// Sign-gradient ascent on mean cross-entropy, projected onto the
/// `eps`-ball around `x` intersected with `[0, 1]`.
pub fn pgd(model: &dyn ScoreModel, x: &Tensor, y: &[usize], cfg: &PgdConfig, rng: &mut impl Rng) -> Result<PgdResult> {
    let start = pgd_start(cfg, x.shape(), rng);
    pgd_from(model, x, y, cfg, &start, |_, _| {})
}

/// PGD from an explicit start offset. `observe(i, iterate)` sees the projected
/// start (`i = 0`) and every later iterate.
pub fn pgd_from(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: &[usize],
    cfg: &PgdConfig,
    start: &Tensor,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<PgdResult> {
    cfg.validate()?;
    if start.shape() != x.shape() {
        return Err(Error::Shape(format!("pgd start {:?} vs input {:?}", start.shape(), x.shape())));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("pgd input must lie in [0, 1]".into()));
    }
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    let mut flagged = vec![false; n];
    if cfg.eps == 0.0 {
        observe(0, x);
        return Ok(PgdResult { x_adv: x.clone(), flagged });
    }
    let project = |adv: &mut Tensor| {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = a.clamp(o - cfg.eps, o + cfg.eps).clamp(0.0, 1.0);
        }
    };
    let mut adv = x.zip_map(start, |a, b| a + b)?;
    project(&mut adv);
    observe(0, &adv);
    for it in 1..=cfg.iters {
        let mut g = Graph::new();
        let xi = g.input(adv.clone())?;
        let logits = model.logits(&mut g, xi)?;
        let loss = g.cross_entropy(logits, y)?;
        let grad = g.backward(loss, &[xi])?.remove(0);
        let data = adv.data_mut();
        for s in 0..n {
            let gs = &grad.data()[s * per..(s + 1) * per];
            if flagged[s] || gs.iter().any(|v| !v.is_finite()) {
                flagged[s] = true;
                continue;
            }
            for (a, &gv) in data[s * per..(s + 1) * per].iter_mut().zip(gs) {
                *a += cfg.step * sign(gv);
            }
        }
        project(&mut adv);
        observe(it, &adv);
    }
    Ok(PgdResult { x_adv: adv, flagged })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Masks and noise attacks

/// Binary pixel mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub m: Tensor,
    pub k: usize,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { m: Tensor::zeros(&[h, w]), k: 0 }
    }

    pub fn from_indices(h: usize, w: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Tensor::zeros(&[h, w]);
        for &i in indices {
            if i >= h * w {
                return Err(Error::Precondition(format!("mask index {i} outside {h}x{w}")));
            }
            m.data_mut()[i] = 1.0;
        }
        let k = m.data().iter().filter(|&&v| v == 1.0).count();
        Ok(Self { m, k })
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.m.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect()
    }

    fn dims(&self) -> (usize, usize) {
        (self.m.shape()[0], self.m.shape()[1])
    }
}

/// Pixel indices ordered by decreasing reduced attribution, ties by row-major index.
pub fn ranked_pixels(map: &AttributionMap) -> Vec<usize> {
    let r = map.reduced.data();
    let mut idx: Vec<usize> = (0..r.len()).collect();
    idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    idx
}

pub fn build_topk_mask(map: &AttributionMap, k: usize) -> Result<Mask> {
    let (h, w) = (map.reduced.shape()[0], map.reduced.shape()[1]);
    if k > h * w {
        return Err(Error::Precondition(format!("k = {k} exceeds {} pixels", h * w)));
    }
    Mask::from_indices(h, w, &ranked_pixels(map)[..k])
}

fn check_image_mask(x: &Tensor, mask: &Mask) -> Result<(usize, usize)> {
    let (h, w) = mask.dims();
    if x.shape().len() != 3 || x.shape()[1] != h || x.shape()[2] != w {
        return Err(Error::Shape(format!("image {:?} vs mask {h}x{w}", x.shape())));
    }
    Ok((x.shape()[0], h * w))
}

fn perturb_masked(x: &Tensor, mask: &Mask, mut f: impl FnMut(f64) -> f64) -> Result<Tensor> {
    let (c, plane) = check_image_mask(x, mask)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for p in mask.indices() {
        for ch in 0..c {
            let v = &mut data[ch * plane + p];
            *v = f(*v).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// INA1: `clip(x + m * N(0, 1))`, one draw per channel of each masked pixel.
pub fn ina1(x: &Tensor, mask: &Mask, rng: &mut impl Rng) -> Result<Tensor> {
    perturb_masked(x, mask, |v| v + rng.sample::<f64, _>(StandardNormal))
}

/// INA2: masked pixels replaced by `clip(N(0, 1))`.
pub fn ina2(x: &Tensor, mask: &Mask, rng: &mut impl Rng) -> Result<Tensor> {
    perturb_masked(x, mask, |_| rng.sample::<f64, _>(StandardNormal))
}

/// RN: INA1 on `k` distinct uniformly chosen pixels.
pub fn rn(x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<(Tensor, Mask)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("image must be [C, H, W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if k > h * w {
        return Err(Error::Precondition(format!("k = {k} exceeds {} pixels", h * w)));
    }
    let picked = index::sample(rng, h * w, k).into_vec();
    let mask = Mask::from_indices(h, w, &picked)?;
    Ok((ina1(x, &mask, rng)?, mask))
}

/// Pixel counts for fractions of an image, deduplicated and at least one pixel.
pub fn k_grid(pixels: usize, fractions: &[f64]) -> Vec<usize> {
    let mut ks: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * pixels as f64).round() as usize).clamp(1, pixels))
        .collect();
    ks.dedup();
    ks
}

pub const DEFAULT_K_FRACTIONS: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.4];

// ---------------------------------------------------------------------------
// Occlusion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Black,
    Gray,
    White,
}

impl Color {
    pub fn value(self) -> f64 {
        match self {
            Color::Black => 0.0,
            Color::Gray => 0.5,
            Color::White => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoaStep {
    pub n: usize,
    pub r: usize,
    /// `(row, col)` of each square center.
    pub centers: Vec<(usize, usize)>,
    /// Pixels covered by each clipped square.
    pub areas: Vec<usize>,
    pub predicted: usize,
}

#[derive(Debug, Clone)]
pub struct IoaOutcome {
    pub image: Tensor,
    pub trace: Vec<IoaStep>,
    pub fooled: bool,
    pub flagged: bool,
}

/// Closed-form area of a `(2r+1)`-square at `(cy, cx)` clipped to `h x w`.
pub fn square_area(cy: usize, cx: usize, r: usize, h: usize, w: usize) -> usize {
    let rows = (cy + r).min(h - 1) + 1 - cy.saturating_sub(r);
    let cols = (cx + r).min(w - 1) + 1 - cx.saturating_sub(r);
    rows * cols
}

/// IOA with a caller-supplied attribution. Outer loop `n = 1..=n_max`, inner
/// `r = 1..=r_max`; each step re-attributes the current image, paints the `n`
/// top pixels' squares and stops as soon as the prediction leaves `y`.
pub fn ioa_with(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: usize,
    n_max: usize,
    r_max: usize,
    color: Color,
    mut attribute: impl FnMut(&Tensor) -> Result<AttributionMap>,
) -> Result<IoaOutcome> {
    if n_max == 0 || r_max == 0 {
        return Err(Error::Precondition("ioa needs N >= 1 and R >= 1".into()));
    }
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("image must be [C, H, W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut image = x.clone();
    let mut trace = Vec::new();
    if predict_one(model, &image)? != y {
        return Ok(IoaOutcome { image, trace, fooled: true, flagged: false });
    }
    for n in 1..=n_max.min(h * w) {
        for r in 1..=r_max {
            let map = match attribute(&image) {
                Ok(m) => m,
                Err(_) => return Ok(IoaOutcome { image, trace, fooled: false, flagged: true }),
            };
            let centers: Vec<(usize, usize)> = ranked_pixels(&map)[..n].iter().map(|&p| (p / w, p % w)).collect();
            let areas = centers
                .iter()
                .map(|&(cy, cx)| cutout_at(&mut image, cy, cx, 2 * r + 1, color.value()))
                .collect();
            let predicted = predict_one(model, &image)?;
            trace.push(IoaStep { n, r, centers, areas, predicted });
            if predicted != y {
                return Ok(IoaOutcome { image, trace, fooled: true, flagged: false });
            }
        }
    }
    Ok(IoaOutcome { image, trace, fooled: false, flagged: false })
}

pub fn ioa(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: usize,
    n_max: usize,
    r_max: usize,
    color: Color,
    method: Method,
    rng: &mut impl Rng,
) -> Result<IoaOutcome> {
    ioa_with(model, x, y, n_max, r_max, color, |img| attribution::attribute(model, img, y, method, rng))
}

fn predict_one(model: &dyn ScoreModel, x: &Tensor) -> Result<usize> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(predict(model, &x.clone().reshape(&shape)?)?[0])
}

// ---------------------------------------------------------------------------
// Corruptions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Gaussian,
    Shot,
    Impulse,
}

/// Per-severity constants (levels 1..=5): gaussian std, shot photon count,
/// impulse rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub gaussian: [f64; 5],
    pub shot: [f64; 5],
    pub impulse: [f64; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            gaussian: [0.04, 0.06, 0.08, 0.09, 0.10],
            shot: [500.0, 250.0, 100.0, 75.0, 50.0],
            impulse: [0.01, 0.02, 0.03, 0.05, 0.07],
        }
    }
}

impl SeverityTable {
    pub fn parameter(&self, kind: Corruption, severity: usize) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity must be 1..=5, got {severity}")));
        }
        Ok(match kind {
            Corruption::Gaussian => self.gaussian,
            Corruption::Shot => self.shot,
            Corruption::Impulse => self.impulse,
        }[severity - 1])
    }
}

/// Apply a corruption with a raw parameter (std, photon count or rate).
pub fn corrupt_with(x: &Tensor, kind: Corruption, param: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let bad = |what: &str| Error::Precondition(format!("{what} parameter {param} out of range"));
    let mut out = x.clone();
    match kind {
        Corruption::Gaussian => {
            if !(param >= 0.0 && param.is_finite()) {
                return Err(bad("gaussian"));
            }
            if param > 0.0 {
                let normal = Normal::new(0.0, param).map_err(|_| bad("gaussian"))?;
                for v in out.data_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
        Corruption::Shot => {
            if !(param > 0.0 && param.is_finite()) {
                return Err(bad("shot"));
            }
            for v in out.data_mut() {
                let rate = *v * param;
                *v = if rate > 0.0 {
                    Poisson::new(rate).map_err(|_| bad("shot"))?.sample(rng) / param
                } else {
                    0.0
                };
            }
        }
        Corruption::Impulse => {
            if !(0.0..=1.0).contains(&param) {
                return Err(bad("impulse"));
            }
            for v in out.data_mut() {
                if rng.random::<f64>() < param {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

pub fn corrupt(
    x: &Tensor,
    kind: Corruption,
    severity: usize,
    table: &SeverityTable,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    corrupt_with(x, kind, table.parameter(kind, severity)?, rng)
}

// ---------------------------------------------------------------------------
// Attack specs and evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AttackKind {
    Pgd { eps: f64, step: f64, iters: usize },
    Ina1 { k: usize },
    Ina2 { k: usize },
    Ioa { n: usize, r: usize, color: Color },
    Rn { k: usize },
    Corrupt { corruption: Corruption, severity: usize },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Pgd { .. } => "pgd",
            AttackKind::Ina1 { .. } => "ina1",
            AttackKind::Ina2 { .. } => "ina2",
            AttackKind::Ioa { .. } => "ioa",
            AttackKind::Rn { .. } => "rn",
            AttackKind::Corrupt { corruption, .. } => match corruption {
                Corruption::Gaussian => "gaussian",
                Corruption::Shot => "shot",
                Corruption::Impulse => "impulse",
            },
        }
    }

    /// The swept quantity, for table rows.
    pub fn parameter(&self) -> String {
        match self {
            AttackKind::Pgd { eps, .. } => format!("{eps}"),
            AttackKind::Ina1 { k } | AttackKind::Ina2 { k } | AttackKind::Rn { k } => k.to_string(),
            AttackKind::Ioa { n, r, color } => format!("N={n};R={r};{color:?}").to_lowercase(),
            AttackKind::Corrupt { severity, .. } => severity.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub attack: AttackKind,
    pub seed: u64,
    #[serde(default = "default_method")]
    pub attribution: Method,
    #[serde(default)]
    pub severities: SeverityTable,
}

fn default_method() -> Method {
    Method::Saliency
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        Self { attack: kind, seed, attribution: Method::Saliency, severities: SeverityTable::default() }
    }

    pub fn validate(&self, image_shape: &[usize]) -> Result<()> {
        let pixels = image_shape[1] * image_shape[2];
        match &self.attack {
            AttackKind::Pgd { eps, step, iters } => {
                PgdConfig { eps: *eps, step: *step, iters: *iters, random_start: true }.validate()
            }
            AttackKind::Ina1 { k } | AttackKind::Ina2 { k } | AttackKind::Rn { k } if *k > pixels => {
                Err(Error::Config(format!("k = {k} exceeds {pixels} pixels")))
            }
            AttackKind::Ioa { n, r, .. } if *n == 0 || *r == 0 => {
                Err(Error::Config("ioa needs N >= 1 and R >= 1".into()))
            }
            AttackKind::Corrupt { corruption, severity } => {
                self.severities.parameter(*corruption, *severity).map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// `[N, C, H, W]`
    pub perturbed: Tensor,
    pub masks: Vec<Option<Mask>>,
    pub correct: Vec<bool>,
    pub flagged: Vec<bool>,
    pub ioa_traces: Vec<Vec<IoaStep>>,
    pub errors: usize,
    pub evaluated: usize,
}

impl AttackOutcome {
    /// Classify `perturbed` against the labels of `batch`.
    pub fn score(model: &dyn ScoreModel, batch: &ImageBatch, perturbed: Tensor) -> Result<Self> {
        let n = batch.len();
        let preds = if n == 0 { Vec::new() } else { predict(model, &perturbed)? };
        let correct: Vec<bool> = preds.iter().zip(&batch.labels).map(|(p, y)| p == y).collect();
        let errors = correct.iter().filter(|&&c| !c).count();
        Ok(Self {
            perturbed,
            masks: vec![None; n],
            correct,
            flagged: vec![false; n],
            ioa_traces: vec![Vec::new(); n],
            errors,
            evaluated: n,
        })
    }

    pub fn error_rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.errors as f64 / self.evaluated as f64
        }
    }
}

/// Attack every image of `batch`; `ids[i]` is the dataset index of sample `i`
/// and selects its random stream.
pub fn attack_batch(model: &dyn ScoreModel, spec: &AttackSpec, batch: &ImageBatch, ids: &[usize]) -> Result<AttackOutcome> {
    spec.validate(batch.image_shape())?;
    if ids.len() != batch.len() {
        return Err(Error::Shape(format!("{} ids for {} samples", ids.len(), batch.len())));
    }
    let n = batch.len();
    let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|&i| sample_rng(spec.seed, i)).collect();
    let mut masks = vec![None; n];
    let mut flagged = vec![false; n];
    let mut traces = vec![Vec::new(); n];
    let perturbed = match &spec.attack {
        AttackKind::Pgd { eps, step, iters } => {
            let cfg = PgdConfig { eps: *eps, step: *step, iters: *iters, random_start: true };
            let starts: Vec<Tensor> =
                rngs.iter_mut().map(|r| pgd_start(&cfg, batch.image_shape(), r)).collect();
            let out = pgd_from(model, &batch.pixels, &batch.labels, &cfg, &Tensor::stack(&starts)?, |_, _| {})?;
            flagged = out.flagged;
            out.x_adv
        }
        AttackKind::Ina1 { k } | AttackKind::Ina2 { k } => {
            let maps = attribute_all(model, batch, spec.attribution, &mut rngs)?;
            let mut images = Vec::with_capacity(n);
            for (i, map) in maps.iter().enumerate() {
                let mask = build_topk_mask(map, *k)?;
                let x = batch.image(i);
                images.push(match spec.attack {
                    AttackKind::Ina1 { .. } => ina1(&x, &mask, &mut rngs[i])?,
                    _ => ina2(&x, &mask, &mut rngs[i])?,
                });
                masks[i] = Some(mask);
            }
            Tensor::stack(&images)?
        }
        AttackKind::Rn { k } => {
            let mut images = Vec::with_capacity(n);
            for (i, rng) in rngs.iter_mut().enumerate() {
                let (img, mask) = rn(&batch.image(i), *k, rng)?;
                images.push(img);
                masks[i] = Some(mask);
            }
            Tensor::stack(&images)?
        }
        AttackKind::Ioa { n: nn, r, color } => {
            let mut images = Vec::with_capacity(n);
            for (i, rng) in rngs.iter_mut().enumerate() {
                let out = ioa(model, &batch.image(i), batch.labels[i], *nn, *r, *color, spec.attribution, rng)?;
                flagged[i] = out.flagged;
                traces[i] = out.trace;
                images.push(out.image);
            }
            Tensor::stack(&images)?
        }
        AttackKind::Corrupt { corruption, severity } => {
            let images = rngs
                .iter_mut()
                .enumerate()
                .map(|(i, rng)| corrupt(&batch.image(i), *corruption, *severity, &spec.severities, rng))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&images)?
        }
    };
    let mut out = AttackOutcome::score(model, batch, perturbed)?;
    out.masks = masks;
    out.flagged = flagged;
    out.ioa_traces = traces;
    Ok(out)
}

fn attribute_all(
    model: &dyn ScoreModel,
    batch: &ImageBatch,
    method: Method,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<AttributionMap>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if method == Method::Saliency {
        return attribution::saliency_batch(model, &batch.pixels, &batch.labels);
    }
    (0..batch.len())
        .map(|i| attribution::attribute(model, &batch.image(i), batch.labels[i], method, &mut rngs[i]))
        .collect()
}

/// Indices every model classifies correctly on clean inputs.
pub fn joint_correct(models: &[&dyn ScoreModel], batch: &ImageBatch) -> Result<Vec<usize>> {
    if models.is_empty() {
        return Err(Error::Precondition("error rate needs at least one model".into()));
    }
    let mut keep = vec![true; batch.len()];
    for m in models {
        for (k, (p, y)) in keep.iter_mut().zip(predict(*m, &batch.pixels)?.iter().zip(&batch.labels)) {
            *k &= p == y;
        }
    }
    Ok(keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
}

#[derive(Debug, Clone)]
pub struct ErrorRates {
    /// Dataset indices of the jointly-correct subset.
    pub subset: Vec<usize>,
    pub outcomes: Vec<AttackOutcome>,
}

impl ErrorRates {
    pub fn rates(&self) -> Vec<f64> {
        self.outcomes.iter().map(AttackOutcome::error_rate).collect()
    }
}

/// Error rate of each model on the samples all of them classify correctly,
/// every model attacked with the same per-sample seeds.
pub fn error_rate(models: &[&dyn ScoreModel], spec: &AttackSpec, batch: &ImageBatch) -> Result<ErrorRates> {
    error_rate_with(models, batch, |m, sub, ids| attack_batch(m, spec, sub, ids))
}

/// [`error_rate`] with an arbitrary attack. The closure receives the model,
/// the jointly-correct sub-batch and the dataset indices of its samples.
pub fn error_rate_with(
    models: &[&dyn ScoreModel],
    batch: &ImageBatch,
    mut attack: impl FnMut(&dyn ScoreModel, &ImageBatch, &[usize]) -> Result<AttackOutcome>,
) -> Result<ErrorRates> {
    let subset = joint_correct(models, batch)?;
    if subset.is_empty() {
        return Err(Error::EmptyJointSubset);
    }
    let sub = batch.select(&subset);
    let outcomes = models.iter().map(|m| attack(*m, &sub, &subset)).collect::<Result<_>>()?;
    Ok(ErrorRates { subset, outcomes })
}
