//! Network definitions, the affine score model, and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{round_to_f32, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Hidden layer widths; the input and output layers come from the spec.
    Mlp { hidden: Vec<usize> },
    /// Output channels of each 3x3 conv, each followed by activation and 2x2 max-pool,
    /// then one dense layer to the classes.
    Cnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub activation: Activation,
    /// `[C, H, W]`
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Per-pixel `(mean, std)` applied as the first layer, so callers always
    /// work in `[0, 1]` pixel space.
    #[serde(default)]
    pub normalization: Option<(f64, f64)>,
}

pub const CONV_KERNEL: usize = 3;

impl ModelSpec {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, activation: Activation) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden: hidden.to_vec() },
            activation,
            input_shape: input_shape.to_vec(),
            classes,
            normalization: None,
        }
    }

    pub fn cnn(input_shape: &[usize], channels: &[usize], classes: usize, activation: Activation) -> Self {
        Self {
            architecture: Architecture::Cnn { channels: channels.to_vec() },
            activation,
            input_shape: input_shape.to_vec(),
            classes,
            normalization: None,
        }
    }

    /// Reference desk-scale MLP: `784 -> 64 -> 64 -> classes` on a 1x28x28 input.
    pub fn reference_mlp(classes: usize) -> Self {
        Self::mlp(&[1, 28, 28], &[64, 64], classes, Activation::Relu)
    }

    /// Reference desk-scale CNN for 3x32x32 inputs.
    pub fn reference_cnn(classes: usize) -> Self {
        Self::cnn(&[3, 32, 32], &[16, 32], classes, Activation::Relu)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("class count must be at least 2, got {}", self.classes)));
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape must be [C, H, W], got {:?}", self.input_shape)));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("layer widths must be at least 1".into()));
                }
            }
            Architecture::Cnn { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Config("cnn needs at least one conv layer with >= 1 channel".into()));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                let shrink = 1usize << channels.len();
                if h % shrink != 0 || w % shrink != 0 {
                    return Err(Error::Config(format!(
                        "spatial size {h}x{w} must be divisible by {shrink} for {} pooling stages",
                        channels.len()
                    )));
                }
            }
        }
        if let Some((_, std)) = self.normalization {
            if std <= 0.0 {
                return Err(Error::Config("normalization std must be positive".into()));
            }
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                let mut fan_in = self.input_len();
                for &width in hidden.iter().chain(std::iter::once(&self.classes)) {
                    shapes.push(vec![fan_in, width]);
                    shapes.push(vec![width]);
                    fan_in = width;
                }
            }
            Architecture::Cnn { channels } => {
                let mut cin = self.input_shape[0];
                for &cout in channels {
                    shapes.push(vec![cout, cin, CONV_KERNEL, CONV_KERNEL]);
                    shapes.push(vec![cout]);
                    cin = cout;
                }
                let shrink = 1usize << channels.len();
                let flat = cin * (self.input_shape[1] / shrink) * (self.input_shape[2] / shrink);
                shapes.push(vec![flat, self.classes]);
                shapes.push(vec![self.classes]);
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Anything that maps a batch of inputs to per-class scores on a graph.
pub trait ScoreModel {
    /// Shape of a single input, `[C, H, W]`.
    fn input_shape(&self) -> &[usize];

    fn classes(&self) -> usize;

    /// Record logits `[N, classes]` for the input node `x: [N, C, H, W]`.
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

/// Parameters of a [`ModelSpec`]. Values are always single-precision representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

/// Node handles produced by recording a network.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

impl Network {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { spec, params })
    }

    /// He-uniform weights, zero biases.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| round_to_f32(rng.random_range(-bound..bound))).collect();
                Tensor::new(shape, data).expect("shape matches count")
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::Shape("parameters do not match the model spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Record the forward pass, registering parameters as graph leaves.
    pub fn record(&self, g: &mut Graph, x: NodeId) -> Result<Recorded> {
        let params = self.register(g)?;
        let logits = self.record_with(g, x, &params)?;
        Ok(Recorded { logits, params })
    }

    /// Add the parameters to `g` as leaves, in declaration order.
    pub fn register(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.params.iter().map(|p| g.parameter(p.clone())).collect()
    }

    /// Record the forward pass against already-registered parameter nodes.
    pub fn record_with(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let batch = check_batch(g, x, &self.spec.input_shape)?;
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} parameter nodes for {} tensors", params.len(), self.params.len())));
        }
        let mut h = x;
        if let Some((mean, std)) = self.spec.normalization {
            let shift = g.constant(Tensor::full(g.shape(x), -mean))?;
            h = g.add(h, shift)?;
            h = g.scale(h, 1.0 / std)?;
        }
        let act = |g: &mut Graph, h: NodeId| match self.spec.activation {
            Activation::Relu => g.relu(h),
            Activation::Softplus => g.softplus(h),
        };
        match &self.spec.architecture {
            Architecture::Mlp { hidden } => {
                h = g.reshape(h, &[batch, self.spec.input_len()])?;
                let layers = hidden.len() + 1;
                for l in 0..layers {
                    h = g.matmul(h, params[2 * l])?;
                    h = g.add_row_bias(h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = act(g, h)?;
                    }
                }
            }
            Architecture::Cnn { channels } => {
                for l in 0..channels.len() {
                    h = g.conv2d(h, params[2 * l])?;
                    h = g.add_channel_bias(h, params[2 * l + 1])?;
                    h = act(g, h)?;
                    h = g.max_pool2(h)?;
                }
                let flat: usize = g.shape(h)[1..].iter().product();
                h = g.reshape(h, &[batch, flat])?;
                let l = channels.len();
                h = g.matmul(h, params[2 * l])?;
                h = g.add_row_bias(h, params[2 * l + 1])?;
            }
        }
        Ok(h)
    }

    /// Logits computed with plain loops, without any graph machinery.
    pub fn logits_direct(&self, batch: &Tensor) -> Result<Tensor> {
        let shape = &self.spec.input_shape;
        if batch.shape().len() != 4 || batch.shape()[1..] != shape[..] {
            return Err(Error::Shape(format!("expected [N, {:?}], got {:?}", shape, batch.shape())));
        }
        let n = batch.shape()[0];
        let act = |v: f64| match self.spec.activation {
            Activation::Relu => v.max(0.0),
            Activation::Softplus => crate::autodiff::softplus(v),
        };
        let mut out = Vec::with_capacity(n * self.spec.classes);
        for i in 0..n {
            let mut x: Vec<f64> = batch.index_first(i).into_data();
            if let Some((mean, std)) = self.spec.normalization {
                x.iter_mut().for_each(|v| *v = (*v - mean) / std);
            }
            let logits = match &self.spec.architecture {
                Architecture::Mlp { hidden } => {
                    let layers = hidden.len() + 1;
                    let mut h = x;
                    for l in 0..layers {
                        h = dense_direct(&h, &self.params[2 * l], &self.params[2 * l + 1]);
                        if l + 1 < layers {
                            h.iter_mut().for_each(|v| *v = act(*v));
                        }
                    }
                    h
                }
                Architecture::Cnn { channels } => {
                    let (mut c, mut hh, mut ww) = (shape[0], shape[1], shape[2]);
                    let mut h = x;
                    for l in 0..channels.len() {
                        let w = &self.params[2 * l];
                        let b = &self.params[2 * l + 1];
                        h = conv_direct(&h, c, hh, ww, w, b);
                        c = w.shape()[0];
                        h.iter_mut().for_each(|v| *v = act(*v));
                        h = pool_direct(&h, c, hh, ww);
                        hh /= 2;
                        ww /= 2;
                    }
                    let l = channels.len();
                    dense_direct(&h, &self.params[2 * l], &self.params[2 * l + 1])
                }
            };
            out.extend(logits);
        }
        Tensor::new(vec![n, self.spec.classes], out)
    }

    /// Number of parameters across all tensors.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

impl ScoreModel for Network {
    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.record(g, x)?.logits)
    }
}

fn check_batch(g: &Graph, x: NodeId, input_shape: &[usize]) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != input_shape.len() + 1 || shape[1..] != input_shape[..] {
        return Err(Error::Shape(format!("expected [N, {input_shape:?}], got {shape:?}")));
    }
    Ok(shape[0])
}

fn dense_direct(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out_dim = w.shape()[1];
    let mut out = b.data().to_vec();
    for (i, &xv) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xv * w.data()[i * out_dim + j];
        }
    }
    out
}

fn conv_direct(x: &[f64], cin: usize, h: usize, w: usize, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let cout = kernel.shape()[0];
    let k = kernel.shape()[2] as isize;
    let pad = k / 2;
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for oy in 0..h as isize {
            for ox in 0..w as isize {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (oy + ky - pad, ox + kx - pad);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wi = ((co * cin + ci) as isize * k + ky) * k + kx;
                            acc += kernel.data()[wi as usize]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * h + oy as usize) * w + ox as usize] = acc;
            }
        }
    }
    out
}

fn pool_direct(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

/// Affine score `w . x + b` over a flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreModel {
    /// Same shape as a single input.
    pub w: Tensor,
    pub b: f64,
}

impl LinearScoreModel {
    pub fn new(w: Tensor, b: f64) -> Self {
        Self { w, b }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.data().iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }
}

impl ScoreModel for LinearScoreModel {
    fn input_shape(&self) -> &[usize] {
        self.w.shape()
    }

    /// A single score; class index 0.
    fn classes(&self) -> usize {
        1
    }

    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let batch = check_batch(g, x, self.w.shape())?;
        let n = self.w.len();
        let flat = g.reshape(x, &[batch, n])?;
        let w = g.parameter(self.w.clone().reshape(&[n, 1])?)?;
        let b = g.parameter(Tensor::from_vec(vec![self.b]))?;
        let s = g.matmul(flat, w)?;
        g.add_row_bias(s, b)
    }
}

/// Logits `[N, C]` for a batch, evaluated on a throwaway graph.
pub fn logits(model: &dyn ScoreModel, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(batch.clone())?;
    let l = model.logits(&mut g, x)?;
    Ok(g.value(l).clone())
}

/// Argmax predictions; ties go to the lowest class index.
pub fn predict(model: &dyn ScoreModel, batch: &Tensor) -> Result<Vec<usize>> {
    let l = logits(model, batch)?;
    let c = l.shape()[1];
    Ok(l.data().chunks(c).map(argmax).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Logit of class `y` for a single input `[C, H, W]`.
pub fn class_score(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<f64> {
    if y >= model.classes() {
        return Err(Error::ClassOutOfRange { class: y, classes: model.classes() });
    }
    let batch = single(x)?;
    let l = logits(model, &batch)?;
    Ok(l.data()[y])
}

fn single(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Per-sample gradients of the labelled logit with respect to the input,
/// shaped like `batch`.
pub fn input_gradients(model: &dyn ScoreModel, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    for &y in labels {
        if y >= model.classes() {
            return Err(Error::ClassOutOfRange { class: y, classes: model.classes() });
        }
    }
    let mut g = Graph::new();
    let x = g.input(batch.clone())?;
    let l = model.logits(&mut g, x)?;
    let picked = g.select_cols(l, labels)?;
    let s = g.sum(picked)?;
    let grad = g.backward(s, &[x])?.remove(0);
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "input_gradient" });
    }
    Ok(grad)
}

/// Gradient and score of class `y` at a single input.
pub fn input_gradient(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<(Tensor, f64)> {
    let batch = single(x)?;
    let grad = input_gradients(model, &batch, &[y])?;
    let score = class_score(model, x, y)?;
    Ok((grad.reshape(x.shape())?, score))
}

/// First-order expansion of the class-`y` score around `x`; exact at `x`.
pub fn linearize(model: &dyn ScoreModel, x: &Tensor, y: usize) -> Result<LinearScoreModel> {
    let (w, score) = input_gradient(model, x, y)?;
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "linearize" });
    }
    let b = score - w.dot(x);
    Ok(LinearScoreModel { w, b })
}

const MAGIC: &[u8; 4] = b"IGDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub method: String,
    pub lambda: f64,
    pub epoch: usize,
    pub seed: u64,
    pub param_count: usize,
    /// Hex SHA-256 of the float payload.
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: Network, method: &str, lambda: f64, epoch: usize, seed: u64) -> Self {
        let payload = payload_bytes(&network);
        let meta = CheckpointMeta {
            model: network.spec().clone(),
            method: method.to_string(),
            lambda,
            epoch,
            seed,
            param_count: network.param_count(),
            payload_sha256: hex_digest(&payload),
        };
        Self { meta, network }
    }

    /// `IGDC | u32 version | u64 metadata length | JSON metadata | f32 payload`,
    /// all integers little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let payload = payload_bytes(&self.network);
        let mut out = Vec::with_capacity(16 + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let header = bytes
            .get(4..16)
            .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
        let version = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = u64::from_le_bytes(header[4..12].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])?;
        meta.model.validate()?;
        let payload = &bytes[meta_end..];
        let expected = meta.model.param_count();
        if meta.param_count != expected || payload.len() != expected * 4 {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, model needs {}",
                payload.len(),
                expected * 4
            )));
        }
        if hex_digest(payload) != meta.payload_sha256 {
            return Err(Error::Integrity("payload digest mismatch".into()));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let params = meta
            .model
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let network = Network::from_params(meta.model.clone(), params)?;
        Ok(Self { meta, network })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn payload_bytes(network: &Network) -> Vec<u8> {
    network
        .params()
        .iter()
        .flat_map(|p| p.data().iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn linear_score_is_dot_plus_bias() {
        let m = LinearScoreModel::new(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap(), 0.5);
        let x = Tensor::new(vec![1, 1, 2], vec![2.0, 1.0]).unwrap();
        assert_eq!(class_score(&m, &x, 0).unwrap(), 1.5);
        assert!(matches!(class_score(&m, &x, 1), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn zero_network_scores_zero() {
        let net = Network::zeros(ModelSpec::mlp(&[1, 4, 4], &[8], 3, Activation::Relu)).unwrap();
        let x = random_input(&[1, 4, 4], 1);
        for y in 0..3 {
            assert_eq!(class_score(&net, &x, y).unwrap(), 0.0);
        }
        let lin = linearize(&net, &x, 1).unwrap();
        assert!(lin.w.data().iter().all(|&v| v == 0.0));
        assert_eq!(lin.b, 0.0);
    }

    #[test]
    fn cnn_graph_matches_direct_evaluation() {
        let spec = ModelSpec::cnn(&[2, 8, 8], &[4, 6], 3, Activation::Relu);
        let net = Network::init(spec, &mut rng(3)).unwrap();
        let batch = random_input(&[2, 2, 8, 8], 4);
        let a = logits(&net, &batch).unwrap();
        let b = net.logits_direct(&batch).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn linearize_is_exact_at_point_and_fixed_on_linear_models() {
        let spec = ModelSpec::cnn(&[1, 8, 8], &[4], 3, Activation::Softplus);
        let net = Network::init(spec, &mut rng(5)).unwrap();
        let x = random_input(&[1, 8, 8], 6);
        let lin = linearize(&net, &x, 2).unwrap();
        let direct = class_score(&net, &x, 2).unwrap();
        assert!((lin.score(x.data()) - direct).abs() <= 1e-5);

        let again = linearize(&lin, &x, 0).unwrap();
        assert!(again.w.max_abs_diff(&lin.w) < 1e-15);
        assert!((again.b - lin.b).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let spec = ModelSpec::mlp(&[1, 4, 4], &[5, 5], 2, Activation::Relu);
        let net = Network::init(spec, &mut rng(7)).unwrap();
        let ck = Checkpoint::new(net.clone(), "standard", 0.0, 3, 42);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (a, b) in back.network.params().iter().zip(net.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.meta, ck.meta);

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 3;
        corrupt[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Integrity(_))));

        assert!(matches!(Checkpoint::from_bytes(&[]), Err(Error::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::Truncated(_))
        ));
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::mlp(&[1, 4, 4], &[3], 1, Activation::Relu).validate().is_err());
        assert!(ModelSpec::mlp(&[1, 4, 4], &[0], 2, Activation::Relu).validate().is_err());
        assert!(ModelSpec::cnn(&[1, 6, 6], &[2, 2], 2, Activation::Relu).validate().is_err());
        assert!(ModelSpec::reference_cnn(10).validate().is_ok());
        assert_eq!(ModelSpec::reference_mlp(10).param_count(), 784 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
    }
}
