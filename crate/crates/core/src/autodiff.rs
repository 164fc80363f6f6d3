//! Reverse-mode automatic differentiation with differentiable backward passes.
//!
//! A [`Graph`] is a define-by-run tape: every op evaluates eagerly and appends a
//! node. [`Graph::grad`] records the vector-Jacobian products as new nodes built
//! from the same op set, so the returned gradients are themselves graph values
//! and can be differentiated again. This is what allows a loss that depends on
//! an input gradient to be differentiated with respect to model parameters.
//!
//! The op set is closed under differentiation: the backward rule of every op is
//! expressed with ops from the set. ReLU, max-pooling and the step mask are
//! piecewise linear and have a zero second derivative.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Parameter,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[N, D] + [D]` broadcast over rows.
    AddRowBias(NodeId, NodeId),
    /// `[N, D] -> [D]`
    SumRows(NodeId),
    /// `[D] -> [N, D]`
    BroadcastRows(NodeId, usize),
    /// `[N, D] -> [N]`
    RowSum(NodeId),
    /// `[N] -> [N, D]`
    BroadcastCols(NodeId, usize),
    Sum(NodeId),
    Expand(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Relu(NodeId),
    StepMask(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Rsqrt(NodeId),
    Conv2d(NodeId, NodeId),
    /// Adjoint of [`Op::Conv2d`] in its input: `(grad_out, weight)`.
    ConvInputGrad(NodeId, NodeId),
    /// Adjoint of [`Op::Conv2d`] in its weight: `(input, grad_out, kernel)`.
    ConvWeightGrad(NodeId, NodeId, usize),
    /// `[N, C, H, W] + [C]`
    AddChannelBias(NodeId, NodeId),
    /// `[N, C, H, W] -> [C]`
    SumToChannels(NodeId),
    /// `[C] -> [N, C, H, W]`
    BroadcastChannels(NodeId, Vec<usize>),
    MaxPool2(NodeId),
    /// Route `[N, C, H/2, W/2]` values back to the argmax positions of a pool node.
    PoolScatter(NodeId, NodeId),
    /// Gather the argmax positions of a pool node.
    PoolGather(NodeId, NodeId),
    LogSumExpRows(NodeId),
    SoftmaxRows(NodeId),
    /// `[N, C] -> [N]`, picks `x[i, labels[i]]`.
    SelectCols(NodeId, Vec<usize>),
    /// `[N] -> [N, C]`, one-hot placement at `labels[i]`.
    ScatterCols(NodeId, Vec<usize>, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RowSum(_) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(_) => "sum",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Relu(_) => "relu",
            Op::StepMask(_) => "step_mask",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Rsqrt(_) => "rsqrt",
            Op::Conv2d(..) => "conv2d",
            Op::ConvInputGrad(..) => "conv_input_grad",
            Op::ConvWeightGrad(..) => "conv_weight_grad",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::SumToChannels(_) => "sum_to_channels",
            Op::BroadcastChannels(..) => "broadcast_channels",
            Op::MaxPool2(_) => "max_pool2",
            Op::PoolScatter(..) => "pool_scatter",
            Op::PoolGather(..) => "pool_gather",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SelectCols(..) => "select_cols",
            Op::ScatterCols(..) => "scatter_cols",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::Conv2d(a, b)
            | Op::ConvInputGrad(a, b)
            | Op::ConvWeightGrad(a, b, _)
            | Op::AddChannelBias(a, b)
            | Op::PoolScatter(a, b)
            | Op::PoolGather(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::RowSum(a)
            | Op::BroadcastCols(a, _)
            | Op::Sum(a)
            | Op::Expand(a, _)
            | Op::Reshape(a, _)
            | Op::Relu(a)
            | Op::StepMask(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Rsqrt(a)
            | Op::SumToChannels(a)
            | Op::BroadcastChannels(a, _)
            | Op::MaxPool2(a)
            | Op::LogSumExpRows(a)
            | Op::SoftmaxRows(a)
            | Op::SelectCols(a, _)
            | Op::ScatterCols(a, _, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Argmax positions for pooling nodes.
    indices: Option<Vec<usize>>,
}

/// Recorded computation. Nodes are stored in creation order, which is a
/// topological order because every op only refers to existing nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes.get(id.0)?.op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf(kind), value, indices: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, LeafKind::Input)
    }

    pub fn parameter(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, LeafKind::Constant)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            self.check(input)?;
        }
        let (value, indices) = eval(&self.nodes, &op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value, indices });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRowBias(x, bias))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(x))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        self.push(Op::BroadcastRows(x, rows))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowSum(x))
    }

    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        self.push(Op::BroadcastCols(x, cols))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    /// Broadcast a single-element node to `shape`.
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Expand(x, shape.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    /// `1[x > 0]`, treated as constant by differentiation.
    pub fn step_mask(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::StepMask(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn rsqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Rsqrt(x))
    }

    /// Stride-1 convolution with `same` zero padding. `x: [N, Cin, H, W]`,
    /// `w: [Cout, Cin, K, K]` with odd `K`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d(x, w))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddChannelBias(x, bias))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MaxPool2(x))
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExpRows(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn select_cols(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SelectCols(x, labels.to_vec()))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.dot(x, x)?;
        let inv = self.rsqrt(sq)?;
        self.mul(sq, inv)
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lse = self.logsumexp_rows(logits)?;
        let picked = self.select_cols(logits, labels)?;
        let per_sample = self.sub(lse, picked)?;
        self.mean(per_sample)
    }

    /// Row-wise cosine similarity of two `[N, D]` nodes, returned as `[N]`.
    ///
    /// Rows where either norm falls below `NORM_FLOOR` contribute a constant
    /// zero. The returned count is the number of such rows.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<(NodeId, usize)> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || self.shape(b) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "cosine_rows needs matching [N, D], got {:?} and {:?}",
                shape,
                self.shape(b)
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let row_norm = |t: &Tensor, i: usize| -> f64 {
            t.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let keep: Vec<f64> = (0..n)
            .map(|i| {
                let ok = row_norm(self.value(a), i) >= NORM_FLOOR
                    && row_norm(self.value(b), i) >= NORM_FLOOR;
                if ok {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let degenerate = keep.iter().filter(|&&k| k == 0.0).count();
        // Degenerate rows are replaced by ones so rsqrt stays finite, then masked out.
        let keep_t = Tensor::new(vec![n, d], keep.iter().flat_map(|&k| vec![k; d]).collect())?;
        let fill = Tensor::new(vec![n, d], keep.iter().flat_map(|&k| vec![1.0 - k; d]).collect())?;
        let keep_node = self.constant(keep_t)?;
        let fill_node = self.constant(fill)?;
        let a_masked = self.mul(a, keep_node)?;
        let a_safe = self.add(a_masked, fill_node)?;
        let b_masked = self.mul(b, keep_node)?;
        let b_safe = self.add(b_masked, fill_node)?;

        let ab = self.mul(a_safe, b_safe)?;
        let dot = self.row_sum(ab)?;
        let aa = self.mul(a_safe, a_safe)?;
        let na = self.row_sum(aa)?;
        let bb = self.mul(b_safe, b_safe)?;
        let nb = self.row_sum(bb)?;
        let ra = self.rsqrt(na)?;
        let rb = self.rsqrt(nb)?;
        let c = self.mul(dot, ra)?;
        let c = self.mul(c, rb)?;
        let row_keep = self.constant(Tensor::from_vec(keep))?;
        let out = self.mul(c, row_keep)?;
        Ok((out, degenerate))
    }

    /// Record the gradient of the single-element node `output` with respect to
    /// each node in `wrt`. The returned nodes are differentiable.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "gradient seed must be a single value, output has shape {:?}",
                self.shape(output)
            )));
        }
        let seed = self.constant(Tensor::full(self.shape(output), 1.0))?;
        self.grad_with_seed(output, seed, wrt)
    }

    /// Vector-Jacobian product of `output` with `seed` (same shape as `output`).
    pub fn grad_with_seed(
        &mut self,
        output: NodeId,
        seed: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let end = output.0 + 1;
        // needs[i]: node i depends on one of the requested nodes.
        let mut needs = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().any(|p| needs[p.0]);
            }
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        grads[output.0] = Some(seed);
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(NodeId(i), &op, g, &needs)? {
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contribution)?,
                    None => contribution,
                });
            }
        }
        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => self.constant(Tensor::zeros(self.shape(w))),
            })
            .collect()
    }

    /// Numeric gradients of `output` with respect to `wrt`. The graph is left
    /// exactly as it was, so repeated calls return identical tensors.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self
            .grad(output, wrt)
            .map(|ids| ids.iter().map(|&id| self.value(id).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    /// Differentiate a scalar built from an input gradient. `inner_output` is
    /// differentiated with respect to `inner_wrt`; `outer` maps that gradient
    /// node to a scalar node, whose gradient with respect to `outer_wrt` is
    /// returned. The graph is restored afterwards.
    pub fn grad_of_grad(
        &mut self,
        inner_output: NodeId,
        inner_wrt: NodeId,
        outer: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
        outer_wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = (|| {
            let inner = self.grad(inner_output, &[inner_wrt])?[0];
            let scalar = outer(self, inner)?;
            let ids = self.grad(scalar, outer_wrt)?;
            Ok(ids.iter().map(|&id| self.value(id).clone()).collect())
        })();
        self.nodes.truncate(mark);
        result
    }

    /// Re-evaluate every node from new leaf values. Leaves not listed keep their
    /// current value. Replaying with the recorded leaf values reproduces every
    /// recorded value bit for bit.
    pub fn forward(&mut self, inputs: &[(NodeId, Tensor)]) -> Result<()> {
        for (id, value) in inputs {
            self.check(*id)?;
            let node = &mut self.nodes[id.0];
            if !matches!(node.op, Op::Leaf(_)) {
                return Err(Error::NotALeaf(id.0));
            }
            if node.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "leaf {} declared {:?}, got {:?}",
                    id.0,
                    node.value.shape(),
                    value.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "leaf" });
            }
            node.value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let (value, indices) = eval(&self.nodes, &self.nodes[i].op)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: self.nodes[i].op.name() });
            }
            self.nodes[i].value = value;
            self.nodes[i].indices = indices;
        }
        Ok(())
    }

    fn vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let want = |id: &NodeId| needs[id.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf(_) | Op::StepMask(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if want(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Neg(a) => out.push((*a, self.neg(g)?)),
            Op::Scale(a, c) => out.push((*a, self.scale(g, *c)?)),
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, self.transpose(g)?)),
            Op::AddRowBias(x, bias) => {
                if want(x) {
                    out.push((*x, g));
                }
                if want(bias) {
                    out.push((*bias, self.sum_rows(g)?));
                }
            }
            Op::SumRows(x) => {
                let rows = self.shape(*x)[0];
                out.push((*x, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(x, _) => out.push((*x, self.sum_rows(g)?)),
            Op::RowSum(x) => {
                let cols = self.shape(*x)[1];
                out.push((*x, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(x, _) => out.push((*x, self.row_sum(g)?)),
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.expand(g, &shape)?));
            }
            Op::Expand(x, _) => {
                let s = self.sum(g)?;
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.reshape(s, &shape)?));
            }
            Op::Reshape(x, _) => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.reshape(g, &shape)?));
            }
            Op::Relu(x) => {
                let mask = self.step_mask(*x)?;
                out.push((*x, self.mul(g, mask)?));
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(*x)?;
                out.push((*x, self.mul(g, s)?));
            }
            Op::Sigmoid(x) => {
                // s' = s - s^2
                let s = node;
                let ss = self.mul(s, s)?;
                let ds = self.sub(s, ss)?;
                out.push((*x, self.mul(g, ds)?));
            }
            Op::Rsqrt(x) => {
                // d/dx x^(-1/2) = -1/2 y^3
                let y = node;
                let y2 = self.mul(y, y)?;
                let y3 = self.mul(y2, y)?;
                let d = self.scale(y3, -0.5)?;
                out.push((*x, self.mul(g, d)?));
            }
            Op::Conv2d(x, w) => {
                if want(x) {
                    out.push((*x, self.push(Op::ConvInputGrad(g, *w))?));
                }
                if want(w) {
                    let k = self.shape(*w)[2];
                    out.push((*w, self.push(Op::ConvWeightGrad(*x, g, k))?));
                }
            }
            Op::ConvInputGrad(go, w) => {
                if want(go) {
                    out.push((*go, self.conv2d(g, *w)?));
                }
                if want(w) {
                    let k = self.shape(*w)[2];
                    out.push((*w, self.push(Op::ConvWeightGrad(g, *go, k))?));
                }
            }
            Op::ConvWeightGrad(x, go, _) => {
                if want(x) {
                    out.push((*x, self.push(Op::ConvInputGrad(*go, g))?));
                }
                if want(go) {
                    out.push((*go, self.conv2d(*x, g)?));
                }
            }
            Op::AddChannelBias(x, bias) => {
                if want(x) {
                    out.push((*x, g));
                }
                if want(bias) {
                    out.push((*bias, self.push(Op::SumToChannels(g))?));
                }
            }
            Op::SumToChannels(x) => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.push(Op::BroadcastChannels(g, shape))?));
            }
            Op::BroadcastChannels(x, _) => out.push((*x, self.push(Op::SumToChannels(g))?)),
            Op::MaxPool2(x) => out.push((*x, self.push(Op::PoolScatter(g, node))?)),
            Op::PoolScatter(src, pool) => {
                if want(src) {
                    out.push((*src, self.push(Op::PoolGather(g, *pool))?));
                }
            }
            Op::PoolGather(src, pool) => {
                if want(src) {
                    out.push((*src, self.push(Op::PoolScatter(g, *pool))?));
                }
            }
            Op::LogSumExpRows(x) => {
                let cols = self.shape(*x)[1];
                let gb = self.broadcast_cols(g, cols)?;
                let s = self.softmax_rows(*x)?;
                out.push((*x, self.mul(gb, s)?));
            }
            Op::SoftmaxRows(x) => {
                // s * (g - rowsum(g * s))
                let s = node;
                let cols = self.shape(*x)[1];
                let gs = self.mul(g, s)?;
                let rs = self.row_sum(gs)?;
                let rb = self.broadcast_cols(rs, cols)?;
                let diff = self.sub(g, rb)?;
                out.push((*x, self.mul(s, diff)?));
            }
            Op::SelectCols(x, labels) => {
                let cols = self.shape(*x)[1];
                out.push((*x, self.push(Op::ScatterCols(g, labels.clone(), cols))?));
            }
            Op::ScatterCols(x, labels, _) => {
                out.push((*x, self.push(Op::SelectCols(g, labels.clone()))?));
            }
        }
        Ok(out)
    }
}

/// Cosine terms with a norm below this floor are defined as zero.
pub const NORM_FLOOR: f64 = 1e-12;

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(shape_err(op, format!("expected rank {rank}, got {:?}", t.shape())));
    }
    Ok(())
}

fn eval(nodes: &[Node], op: &Op) -> Result<(Tensor, Option<Vec<usize>>)> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let name = op.name();
    let t = match op {
        Op::Leaf(_) => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
        Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y)?,
        Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::MatMul(a, b) => matmul(v(a), v(b))?,
        Op::Transpose(a) => {
            let a = v(a);
            expect_rank(name, a, 2)?;
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        }
        Op::AddRowBias(x, b) => {
            let (x, b) = (v(x), v(b));
            expect_rank(name, x, 2)?;
            let d = x.shape()[1];
            if b.shape() != [d] {
                return Err(shape_err(name, format!("{:?} + {:?}", x.shape(), b.shape())));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::SumRows(x) => {
            let x = v(x);
            expect_rank(name, x, 2)?;
            let d = x.shape()[1];
            let mut out = vec![0.0; d];
            for row in x.data().chunks(d) {
                for (o, xv) in out.iter_mut().zip(row) {
                    *o += xv;
                }
            }
            Tensor::new(vec![d], out)?
        }
        Op::BroadcastRows(x, rows) => {
            let x = v(x);
            expect_rank(name, x, 1)?;
            let mut out = Vec::with_capacity(rows * x.len());
            for _ in 0..*rows {
                out.extend_from_slice(x.data());
            }
            Tensor::new(vec![*rows, x.len()], out)?
        }
        Op::RowSum(x) => {
            let x = v(x);
            expect_rank(name, x, 2)?;
            let d = x.shape()[1].max(1);
            let out: Vec<f64> = x.data().chunks(d).map(|r| r.iter().sum()).collect();
            Tensor::new(vec![x.shape()[0]], out)?
        }
        Op::BroadcastCols(x, cols) => {
            let x = v(x);
            expect_rank(name, x, 1)?;
            let out: Vec<f64> = x.data().iter().flat_map(|&xv| std::iter::repeat_n(xv, *cols)).collect();
            Tensor::new(vec![x.len(), *cols], out)?
        }
        Op::Sum(x) => Tensor::scalar(v(x).sum()),
        Op::Expand(x, shape) => {
            let x = v(x);
            if x.len() != 1 {
                return Err(shape_err(name, format!("source must be single-valued, got {:?}", x.shape())));
            }
            Tensor::full(shape, x.data()[0])
        }
        Op::Reshape(x, shape) => v(x).clone().reshape(shape)?,
        Op::Relu(x) => v(x).map(|a| if a > 0.0 { a } else { 0.0 }),
        Op::StepMask(x) => v(x).map(|a| if a > 0.0 { 1.0 } else { 0.0 }),
        Op::Softplus(x) => v(x).map(softplus),
        Op::Sigmoid(x) => v(x).map(sigmoid),
        Op::Rsqrt(x) => v(x).map(|a| 1.0 / a.sqrt()),
        Op::Conv2d(x, w) => conv2d(v(x), v(w))?,
        Op::ConvInputGrad(g, w) => conv_input_grad(v(g), v(w))?,
        Op::ConvWeightGrad(x, g, k) => conv_weight_grad(v(x), v(g), *k)?,
        Op::AddChannelBias(x, b) => {
            let (x, b) = (v(x), v(b));
            expect_rank(name, x, 4)?;
            let c = x.shape()[1];
            if b.shape() != [c] {
                return Err(shape_err(name, format!("{:?} + {:?}", x.shape(), b.shape())));
            }
            let plane = x.shape()[2] * x.shape()[3];
            let mut out = x.clone();
            for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = b.data()[k % c];
                chunk.iter_mut().for_each(|o| *o += bv);
            }
            out
        }
        Op::SumToChannels(x) => {
            let x = v(x);
            expect_rank(name, x, 4)?;
            let c = x.shape()[1];
            let plane = x.shape()[2] * x.shape()[3];
            let mut out = vec![0.0; c];
            for (k, chunk) in x.data().chunks(plane.max(1)).enumerate() {
                out[k % c] += chunk.iter().sum::<f64>();
            }
            Tensor::new(vec![c], out)?
        }
        Op::BroadcastChannels(b, shape) => {
            let b = v(b);
            if shape.len() != 4 || b.shape() != [shape[1]] {
                return Err(shape_err(name, format!("{:?} to {:?}", b.shape(), shape)));
            }
            let c = shape[1];
            let plane = shape[2] * shape[3];
            let mut out = Vec::with_capacity(shape.iter().product());
            for k in 0..shape[0] * c {
                out.extend(std::iter::repeat_n(b.data()[k % c], plane));
            }
            Tensor::new(shape.clone(), out)?
        }
        Op::MaxPool2(x) => {
            let (t, idx) = max_pool2(v(x))?;
            return Ok((t, Some(idx)));
        }
        Op::PoolScatter(g, pool) => {
            let (g, pool_node) = (v(g), &nodes[pool.0]);
            let idx = pool_indices(nodes, *pool)?;
            let src_shape = pool_source_shape(nodes, pool_node)?;
            if g.shape() != pool_node.value.shape() {
                return Err(shape_err(name, format!("{:?} vs pooled {:?}", g.shape(), pool_node.value.shape())));
            }
            let mut out = Tensor::zeros(&src_shape);
            for (gv, &i) in g.data().iter().zip(idx) {
                out.data_mut()[i] += gv;
            }
            out
        }
        Op::PoolGather(g, pool) => {
            let (g, pool_node) = (v(g), &nodes[pool.0]);
            let idx = pool_indices(nodes, *pool)?;
            let src_shape = pool_source_shape(nodes, pool_node)?;
            if g.shape() != src_shape.as_slice() {
                return Err(shape_err(name, format!("{:?} vs source {:?}", g.shape(), src_shape)));
            }
            let data = idx.iter().map(|&i| g.data()[i]).collect();
            Tensor::new(pool_node.value.shape().to_vec(), data)?
        }
        Op::LogSumExpRows(x) => {
            let x = v(x);
            expect_rank(name, x, 2)?;
            let c = x.shape()[1];
            let out = x
                .data()
                .chunks(c)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::new(vec![x.shape()[0]], out)?
        }
        Op::SoftmaxRows(x) => {
            let x = v(x);
            expect_rank(name, x, 2)?;
            let c = x.shape()[1];
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                out.extend(softmax(row));
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::SelectCols(x, labels) => {
            let x = v(x);
            expect_rank(name, x, 2)?;
            let (n, c) = (x.shape()[0], x.shape()[1]);
            if labels.len() != n {
                return Err(shape_err(name, format!("{} labels for {} rows", labels.len(), n)));
            }
            let mut out = Vec::with_capacity(n);
            for (i, &l) in labels.iter().enumerate() {
                if l >= c {
                    return Err(Error::ClassOutOfRange { class: l, classes: c });
                }
                out.push(x.data()[i * c + l]);
            }
            Tensor::new(vec![n], out)?
        }
        Op::ScatterCols(x, labels, cols) => {
            let x = v(x);
            expect_rank(name, x, 1)?;
            let n = x.len();
            if labels.len() != n {
                return Err(shape_err(name, format!("{} labels for {} rows", labels.len(), n)));
            }
            let mut out = vec![0.0; n * cols];
            for (i, &l) in labels.iter().enumerate() {
                out[i * cols + l] = x.data()[i];
            }
            Tensor::new(vec![n, *cols], out)?
        }
    };
    Ok((t, None))
}

fn pool_indices(nodes: &[Node], pool: NodeId) -> Result<&[usize]> {
    nodes[pool.0]
        .indices
        .as_deref()
        .ok_or_else(|| shape_err("pool", format!("node {} is not a max-pool node", pool.0)))
}

fn pool_source_shape(nodes: &[Node], pool_node: &Node) -> Result<Vec<usize>> {
    match pool_node.op {
        Op::MaxPool2(src) => Ok(nodes[src.0].value.shape().to_vec()),
        _ => Err(shape_err("pool", "reference is not a max-pool node".into())),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn conv_dims(x_shape: &[usize], w_shape: &[usize], op: &str) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(shape_err(op, format!("{x_shape:?} with kernel {w_shape:?}")));
    }
    let k = w_shape[2];
    if w_shape[3] != k || k % 2 == 0 {
        return Err(shape_err(op, format!("kernel must be square and odd, got {w_shape:?}")));
    }
    Ok(ConvDims {
        n: x_shape[0],
        cin: w_shape[1],
        cout: w_shape[0],
        h: x_shape[2],
        w: x_shape[3],
        k,
    })
}

/// Iterate the valid (output offset, input offset, length) spans along one
/// axis for kernel tap `t` of a `same`-padded stride-1 convolution.
fn tap_span(t: usize, pad: usize, len: usize) -> (usize, usize, usize) {
    // input = output + t - pad
    if t >= pad {
        let shift = t - pad;
        (0, shift, len.saturating_sub(shift))
    } else {
        let shift = pad - t;
        (shift, 0, len.saturating_sub(shift))
    }
}

fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape(), "conv2d")?;
    if x.shape()[1] != d.cin {
        return Err(shape_err("conv2d", format!("{:?} with kernel {:?}", x.shape(), w.shape())));
    }
    let pad = d.k / 2;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.n * d.cout * plane];
    for n in 0..d.n {
        for co in 0..d.cout {
            let o_base = (n * d.cout + co) * plane;
            for ci in 0..d.cin {
                let x_base = (n * d.cin + ci) * plane;
                for ky in 0..d.k {
                    let (oy0, iy0, ny) = tap_span(ky, pad, d.h);
                    for kx in 0..d.k {
                        let wv = w.data()[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ix0, nx) = tap_span(kx, pad, d.w);
                        for r in 0..ny {
                            let o_row = o_base + (oy0 + r) * d.w + ox0;
                            let i_row = x_base + (iy0 + r) * d.w + ix0;
                            let (o, i) = (&mut out[o_row..o_row + nx], &x.data()[i_row..i_row + nx]);
                            for (ov, iv) in o.iter_mut().zip(i) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

fn conv_input_grad(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = conv_dims(g.shape(), w.shape(), "conv_input_grad")?;
    if g.shape()[1] != d.cout {
        return Err(shape_err("conv_input_grad", format!("{:?} with kernel {:?}", g.shape(), w.shape())));
    }
    let pad = d.k / 2;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.n * d.cin * plane];
    for n in 0..d.n {
        for co in 0..d.cout {
            let g_base = (n * d.cout + co) * plane;
            for ci in 0..d.cin {
                let x_base = (n * d.cin + ci) * plane;
                for ky in 0..d.k {
                    let (oy0, iy0, ny) = tap_span(ky, pad, d.h);
                    for kx in 0..d.k {
                        let wv = w.data()[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ix0, nx) = tap_span(kx, pad, d.w);
                        for r in 0..ny {
                            let g_row = g_base + (oy0 + r) * d.w + ox0;
                            let i_row = x_base + (iy0 + r) * d.w + ix0;
                            let (o, gs) = (&mut out[i_row..i_row + nx], &g.data()[g_row..g_row + nx]);
                            for (ov, gv) in o.iter_mut().zip(gs) {
                                *ov += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cin, d.h, d.w], out)
}

fn conv_weight_grad(x: &Tensor, g: &Tensor, k: usize) -> Result<Tensor> {
    if x.shape().len() != 4
        || g.shape().len() != 4
        || x.shape()[0] != g.shape()[0]
        || x.shape()[2..] != g.shape()[2..]
        || k % 2 == 0
    {
        return Err(shape_err("conv_weight_grad", format!("{:?} with {:?}", x.shape(), g.shape())));
    }
    let (n_batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = g.shape()[1];
    let pad = k / 2;
    let plane = h * w;
    let mut out = vec![0.0; cout * cin * k * k];
    for n in 0..n_batch {
        for co in 0..cout {
            let g_base = (n * cout + co) * plane;
            for ci in 0..cin {
                let x_base = (n * cin + ci) * plane;
                for ky in 0..k {
                    let (oy0, iy0, ny) = tap_span(ky, pad, h);
                    for kx in 0..k {
                        let (ox0, ix0, nx) = tap_span(kx, pad, w);
                        let mut acc = 0.0;
                        for r in 0..ny {
                            let g_row = g_base + (oy0 + r) * w + ox0;
                            let i_row = x_base + (iy0 + r) * w + ix0;
                            acc += g.data()[g_row..g_row + nx]
                                .iter()
                                .zip(&x.data()[i_row..i_row + nx])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        out[((co * cin + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, cin, k, k], out)
}

fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    expect_rank("max_pool2", x, 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err("max_pool2", format!("input too small: {:?}", x.shape())));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_forward() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = g.reshape(x, &[2]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[2.0, 3.0])).unwrap();
        let w = g.parameter(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let b = g.parameter(t(&[1], &[0.0])).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_row_bias(xw, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(s).item(), 5.0);
        let grads = g.backward(s, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_piecewise_slope() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let d = g.backward(s, &[x]).unwrap();
        assert_eq!(d[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_leaves_graph_untouched() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.3, -0.7])).unwrap();
        let y = g.softplus(x).unwrap();
        let s = g.sum(y).unwrap();
        let before = g.len();
        let a = g.backward(s, &[x]).unwrap();
        let b = g.backward(s, &[x]).unwrap();
        assert_eq!(g.len(), before);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_node_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s, &[NodeId(99)]), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn grad_of_linear_input_gradient() {
        // f = w.x, outer = sum(df/dx) = sum(w) -> d outer / dw = 1
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.5, -1.0, 2.0])).unwrap();
        let w = g.parameter(t(&[3, 1], &[1.0, 2.0, -3.0])).unwrap();
        let f = g.matmul(x, w).unwrap();
        let f = g.sum(f).unwrap();
        let d = g.grad_of_grad(f, x, |g, gx| g.sum(gx), &[w]).unwrap();
        assert_eq!(d[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_scaled_half_norm() {
        // f = a * 0.5 |x|^2, outer = sum(df/dx) = a * sum(x) -> d outer / da = sum(x)
        let xs = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(xs.to_vec())).unwrap();
        let a = g.parameter(Tensor::from_vec(vec![1.7])).unwrap();
        let sq = g.dot(x, x).unwrap();
        let half = g.scale(sq, 0.5).unwrap();
        let half = g.reshape(half, &[1]).unwrap();
        let f = g.mul(half, a).unwrap();
        let f = g.sum(f).unwrap();
        let d = g.grad_of_grad(f, x, |g, gx| g.sum(gx), &[a]).unwrap();
        assert!((d[0].item() - xs.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[0.1, -0.2, 0.3, 0.4])).unwrap();
        let w = g.parameter(t(&[2, 2], &[1.0, 0.5, -0.5, 2.0])).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.softplus(h).unwrap();
        let s = g.sum(h).unwrap();
        let recorded = g.value(s).clone();
        g.forward(&[]).unwrap();
        assert_eq!(g.value(s), &recorded);
        g.forward(&[(x, t(&[2, 2], &[0.0; 4]))]).unwrap();
        assert_ne!(g.value(s), &recorded);
        assert!(g.forward(&[(x, t(&[4], &[0.0; 4]))]).is_err());
        assert!(matches!(g.forward(&[(h, t(&[2, 2], &[0.0; 4]))]), Err(Error::NotALeaf(_))));
    }

    #[test]
    fn cosine_guard_on_zero_rows() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0])).unwrap();
        let b = g.input(t(&[2, 2], &[1.0, 0.0, 2.0, 2.0])).unwrap();
        let (c, degenerate) = g.cosine_rows(a, b).unwrap();
        assert_eq!(degenerate, 1);
        assert_eq!(g.value(c).data()[0], 0.0);
        assert!((g.value(c).data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.0])).unwrap();
        assert!(matches!(g.rsqrt(x), Err(Error::NonFinite { op: "rsqrt" })));
        assert!(g.input(Tensor::from_vec(vec![f64::NAN])).is_err());
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g
            .input(t(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.2]))
            .unwrap();
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.9]);
        let s = g.sum(p).unwrap();
        let d = g.backward(s, &[x]).unwrap();
        assert_eq!(d[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
