//! Attribution maps from input gradients.
//!
//! Every map carries the raw `[C, H, W]` values and a per-pixel reduction: the
//! channel sum of absolute values. The reduction feeds Gini metrics and attack
//! masks.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{input_gradients, ScoreModel};
use crate::tensor::Tensor;

pub const DEFAULT_IG_STEPS: usize = 32;
pub const DEFAULT_SMOOTHGRAD_SIGMA: f64 = 0.1;
pub const DEFAULT_SMOOTHGRAD_SAMPLES: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Method {
    Saliency,
    InputXGradient,
    /// Zero-image baseline.
    IntegratedGradients { steps: usize },
    SmoothGrad { sigma: f64, samples: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::InputXGradient => "input_x_gradient",
            Method::IntegratedGradients { .. } => "integrated_gradients",
            Method::SmoothGrad { .. } => "smoothgrad",
        }
    }

    pub fn integrated_gradients() -> Self {
        Method::IntegratedGradients { steps: DEFAULT_IG_STEPS }
    }

    pub fn smoothgrad() -> Self {
        Method::SmoothGrad { sigma: DEFAULT_SMOOTHGRAD_SIGMA, samples: DEFAULT_SMOOTHGRAD_SAMPLES }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `[C, H, W]`
    pub values: Tensor,
    pub method: Method,
    pub target: usize,
    /// `[H, W]`, `sum_c |values[c, h, w]|`.
    pub reduced: Tensor,
}

impl AttributionMap {
    pub fn new(values: Tensor, method: Method, target: usize) -> Result<Self> {
        let reduced = reduce_channels(&values)?;
        Ok(Self { values, method, target, reduced })
    }

    /// True when every attribution is zero, so Gini is undefined.
    pub fn is_zero(&self) -> bool {
        self.reduced.data().iter().all(|&v| v == 0.0)
    }

    /// Raw values as little-endian `f32` plus a JSON sidecar next to it.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.values.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = MapSidecar {
            shape: self.values.shape().to_vec(),
            method: self.method,
            class: self.target,
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: MapSidecar = serde_json::from_slice(&text)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let n: usize = meta.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Truncated(format!("{} has {} bytes, expected {}", path.display(), bytes.len(), n * 4)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(Tensor::new(meta.shape, data)?, meta.method, meta.class)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapSidecar {
    shape: Vec<usize>,
    method: Method,
    class: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// `[C, H, W] -> [H, W]` channel sum of absolute values.
pub fn reduce_channels(values: &Tensor) -> Result<Tensor> {
    if values.shape().len() != 3 {
        return Err(Error::Shape(format!("attribution values must be [C, H, W], got {:?}", values.shape())));
    }
    let (c, h, w) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&values.data()[ch * plane..(ch + 1) * plane]) {
            *o += v.abs();
        }
    }
    Tensor::new(vec![h, w], out)
}

fn batch_of(x: &Tensor, copies: usize) -> Result<Tensor> {
    let mut shape = vec![copies];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(copies * x.len());
    for _ in 0..copies {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data)
}

fn gradient(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<Tensor> {
    input_gradients(model, &batch_of(x, 1)?, &[y])?.reshape(x.shape())
}

/// Input gradient of the class-`y` logit.
pub fn saliency(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<AttributionMap> {
    AttributionMap::new(gradient(model, x, y)?, Method::Saliency, y)
}

/// `x * grad`.
pub fn input_x_gradient(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<AttributionMap> {
    let g = gradient(model, x, y)?;
    AttributionMap::new(g.zip_map(x, |g, x| g * x)?, Method::InputXGradient, y)
}

/// `(x - baseline) * mean of gradients at the midpoints of `steps` equal segments
/// of the straight path from `baseline` to `x`.
pub fn integrated_gradients(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<AttributionMap> {
    if steps < 8 {
        return Err(Error::Precondition(format!("integrated gradients needs >= 8 steps, got {steps}")));
    }
    if baseline.shape() != x.shape() {
        return Err(Error::Shape(format!("baseline {:?} vs input {:?}", baseline.shape(), x.shape())));
    }
    let diff = x.zip_map(baseline, |a, b| a - b)?;
    let points: Vec<Tensor> = (0..steps)
        .map(|i| {
            let t = (i as f64 + 0.5) / steps as f64;
            baseline.zip_map(&diff, |b, d| b + t * d)
        })
        .collect::<Result<_>>()?;
    let grads = input_gradients(model, &Tensor::stack(&points)?, &vec![y; steps])?;
    let mean = mean_first_axis(&grads, x.shape())?;
    let method = Method::IntegratedGradients { steps };
    AttributionMap::new(diff.zip_map(&mean, |d, g| d * g)?, method, y)
}

/// Mean saliency over Gaussian-perturbed copies of `x` (std `sigma`, pixel units).
pub fn smoothgrad(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: usize,
    sigma: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<AttributionMap> {
    if samples == 0 {
        return Err(Error::Precondition("smoothgrad needs at least one sample".into()));
    }
    let method = Method::SmoothGrad { sigma, samples };
    if sigma == 0.0 {
        return AttributionMap::new(gradient(model, x, y)?, method, y);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Precondition(e.to_string()))?;
    let noisy: Vec<Tensor> = (0..samples)
        .map(|_| {
            let data = x.data().iter().map(|&v| v + normal.sample(rng)).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let grads = input_gradients(model, &Tensor::stack(&noisy)?, &vec![y; samples])?;
    AttributionMap::new(mean_first_axis(&grads, x.shape())?, method, y)
}

fn mean_first_axis(batch: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n = batch.shape()[0];
    let inner = batch.len() / n;
    let mut out = vec![0.0; inner];
    for row in batch.data().chunks(inner) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(shape.to_vec(), out)
}

/// Attribution by any method with the default baseline (zero image).
pub fn attribute(
    model: &dyn ScoreModel,
    x: &Tensor,
    y: usize,
    method: Method,
    rng: &mut impl Rng,
) -> Result<AttributionMap> {
    match method {
        Method::Saliency => saliency(model, x, y),
        Method::InputXGradient => input_x_gradient(model, x, y),
        Method::IntegratedGradients { steps } => {
            integrated_gradients(model, x, y, &Tensor::zeros(x.shape()), steps)
        }
        Method::SmoothGrad { sigma, samples } => smoothgrad(model, x, y, sigma, samples, rng),
    }
}

/// Saliency maps for a whole batch `[N, C, H, W]` in a single backward pass.
pub fn saliency_batch(model: &dyn ScoreModel, batch: &Tensor, labels: &[usize]) -> Result<Vec<AttributionMap>> {
    let grads = input_gradients(model, batch, labels)?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| AttributionMap::new(grads.index_first(i), Method::Saliency, y))
        .collect()
}
