use std::collections::BTreeMap;

use super::kernels::{self, sigmoid};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// Current batch statistics (biased variance).
    Batch { eps: f64 },
    /// Externally supplied per-channel statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics observed by a batch-mode normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Matmul,
    Add,
    Mul,
    Scale(f64),
    BiasAdd,
    Relu { mask: Vec<bool> },
    Sigmoid,
    GlobalAvgPool,
    Sum,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Quantize,
    BceWithLogits { targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every parent id is smaller
/// than its child's id.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `dLoss/dLeaf` for every gradient-tracking leaf of a tape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn remove(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.by_leaf.remove(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(TensorError::shape("batch_norm", shape, &[0, 0, 0, 0])),
    }
}

impl Tape {
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![input, kernel], out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    /// Multiply by a constant scalar (the only broadcast the tape allows).
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        self.push(Op::Scale(factor), vec![a], out)
    }

    /// `x[i, j] + bias[j]` for `x: [B, N]`, `bias: [N]`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let [_, n] = tx.dims2("bias_add")?;
        if tb.shape() != [n] {
            return Err(TensorError::shape("bias_add", tx.shape(), tb.shape()));
        }
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tb.data()[i % n]);
        Ok(self.push(Op::BiasAdd, vec![x, bias], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mask: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
        let out = Tensor::from_fn(t.shape(), |i| if mask[i] { t.data()[i] } else { 0.0 });
        self.push(Op::Relu { mask }, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i]));
        self.push(Op::Sigmoid, vec![x], out)
    }

    /// `[B, C, H, W] -> [B, C]`, mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let [b, c, h, w] = t.dims4("global_avg_pool")?;
        let plane = h * w;
        let out = Tensor::from_fn(&[b, c], |i| {
            t.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64
        });
        Ok(self.push(Op::GlobalAvgPool, vec![x], out))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    /// Per-channel normalization followed by `gamma * xhat + beta`.
    ///
    /// Accepts `[B, C]` or `[B, C, H, W]`. In batch mode the observed
    /// statistics are returned so the caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        norm: Normalization<'_>,
    ) -> Result<(NodeId, Option<BatchStats>), TensorError> {
        let t = self.value(x);
        let (b, c, plane) = channel_layout(t.shape())?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::shape("batch_norm", t.shape(), self.value(p).shape()));
            }
        }
        let count = b * plane;
        let at = |s: usize, ch: usize, k: usize| (s * c + ch) * plane + k;
        let (mean, var, eps, batch) = match norm {
            Normalization::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..b {
                        for k in 0..plane {
                            acc += t.data()[at(s, ch, k)];
                        }
                    }
                    mean[ch] = acc / count as f64;
                    let mut sq = 0.0;
                    for s in 0..b {
                        for k in 0..plane {
                            let d = t.data()[at(s, ch, k)] - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / count as f64;
                }
                (mean, var, eps, true)
            }
            Normalization::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape("batch_norm", t.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for i in 0..t.len() {
            let ch = (i / plane) % c;
            xhat[i] = (t.data()[i] - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + be[ch];
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let stats = batch.then_some(BatchStats { mean, var, count });
        let id = self.push(Op::BatchNorm { xhat, inv_std, batch }, vec![x, gamma, beta], out);
        Ok((id, stats))
    }

    /// Round every element to the nearest binary16 value. The backward
    /// pass rounds the incoming gradient the same way.
    pub fn quantize(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| round_binary16(t.data()[i]));
        self.push(Op::Quantize, vec![x], out)
    }

    /// Mean binary cross-entropy on logits, in the overflow-safe form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId, TensorError> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(TensorError::shape("bce_with_logits", t.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Contract(format!(
                "bce_with_logits targets must be 0 or 1, found {bad}"
            )));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| bce_term(x, y))
            .sum();
        let loss = Tensor::scalar(total / t.len() as f64);
        Ok(self.push(
            Op::BceWithLogits {
                targets: targets.data().to_vec(),
            },
            vec![logits],
            loss,
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse sweep seeded with `seed` instead of 1 (loss scaling).
    pub fn backward_scaled(&self, loss: NodeId, seed: f64) -> Result<Gradients, TensorError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        let mut by_leaf = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let parent_needs = |k: usize| self.nodes[node.parents[k].0].requires_grad;
            let mut contributions: Vec<(NodeId, Vec<f64>)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {
                    by_leaf.insert(NodeId(id), Tensor::new(node.value.shape().to_vec(), g)?);
                    continue;
                }
                Op::Conv2d { stride, padding } => {
                    let (x, w) = (node.parents[0], node.parents[1]);
                    let dy = Tensor::new(node.value.shape().to_vec(), g)?;
                    let (dx, dw) = kernels::conv2d_backward(
                        self.value(x),
                        self.value(w),
                        &dy,
                        *stride,
                        *padding,
                        parent_needs(0),
                        parent_needs(1),
                    )?;
                    if let Some(dx) = dx {
                        contributions.push((x, dx.into_data()));
                    }
                    if let Some(dw) = dw {
                        contributions.push((w, dw.into_data()));
                    }
                }
                Op::Matmul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let [m, k] = self.value(a).dims2("matmul")?;
                    let [_, n] = self.value(b).dims2("matmul")?;
                    if parent_needs(0) {
                        contributions.push((a, kernels::matmul_a_bt(&g, self.value(b).data(), m, n, k)));
                    }
                    if parent_needs(1) {
                        contributions.push((b, kernels::matmul_at_b(self.value(a).data(), &g, m, k, n)));
                    }
                }
                Op::Add => {
                    contributions.push((node.parents[0], g.clone()));
                    contributions.push((node.parents[1], g));
                }
                Op::Mul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let da = g.iter().zip(self.value(b).data()).map(|(g, v)| g * v).collect();
                    let db = g.iter().zip(self.value(a).data()).map(|(g, v)| g * v).collect();
                    contributions.push((a, da));
                    contributions.push((b, db));
                }
                Op::Scale(factor) => {
                    contributions.push((node.parents[0], g.iter().map(|v| v * factor).collect()));
                }
                Op::BiasAdd => {
                    let n = self.value(node.parents[1]).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    contributions.push((node.parents[0], g));
                    contributions.push((node.parents[1], db));
                }
                Op::Relu { mask } => {
                    let dx = g.iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
                    contributions.push((node.parents[0], dx));
                }
                Op::Sigmoid => {
                    let s = node.value.data();
                    let dx = g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect();
                    contributions.push((node.parents[0], dx));
                }
                Op::GlobalAvgPool => {
                    let x = self.value(node.parents[0]);
                    let [_, _, h, w] = x.dims4("global_avg_pool")?;
                    let plane = h * w;
                    let dx = (0..x.len()).map(|i| g[i / plane] / plane as f64).collect();
                    contributions.push((node.parents[0], dx));
                }
                Op::Sum => {
                    let n = self.value(node.parents[0]).len();
                    contributions.push((node.parents[0], vec![g[0]; n]));
                }
                Op::BatchNorm { xhat, inv_std, batch } => {
                    let x = self.value(node.parents[0]);
                    let gamma = self.value(node.parents[1]).data();
                    let (b, c, plane) = channel_layout(x.shape())?;
                    let count = (b * plane) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for i in 0..g.len() {
                        let ch = (i / plane) % c;
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                        let dxh = g[i] * gamma[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xhat[i];
                    }
                    if parent_needs(0) {
                        let dx = (0..g.len())
                            .map(|i| {
                                let ch = (i / plane) % c;
                                let dxh = g[i] * gamma[ch];
                                if *batch {
                                    inv_std[ch] / count
                                        * (count * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                                } else {
                                    dxh * inv_std[ch]
                                }
                            })
                            .collect();
                        contributions.push((node.parents[0], dx));
                    }
                    contributions.push((node.parents[1], dgamma));
                    contributions.push((node.parents[2], dbeta));
                }
                Op::Quantize => {
                    contributions.push((node.parents[0], g.iter().map(|&v| round_binary16(v)).collect()));
                }
                Op::BceWithLogits { targets } => {
                    let x = self.value(node.parents[0]).data();
                    let n = x.len() as f64;
                    let dx = x
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect();
                    contributions.push((node.parents[0], dx));
                }
            }
            for (parent, contribution) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                by_leaf
                    .entry(NodeId(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

/// One element of the stable BCE-with-logits sum.
///
/// Once `|x| >= 50` the softplus tail `ln(1 + e^-|x|)` is below 2e-22 and is
/// dropped, so the loss saturates to exactly `max(x, 0) - x*y`.
#[inline]
pub(crate) fn bce_term(x: f64, y: f64) -> f64 {
    let tail = if x.abs() >= 50.0 { 0.0 } else { (-x.abs()).exp().ln_1p() };
    x.max(0.0) - x * y + tail
}

#[inline]
pub(crate) fn round_binary16(x: f64) -> f64 {
    half::f16::from_f64(x).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        for (input, expected) in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(input), true);
            let y = tape.relu(x);
            let g = tape.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap().data(), &[expected], "relu'({input})");
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn global_avg_pool_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1]);
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let frozen = tape.leaf(Tensor::scalar(1.0), false);
        let y = tape.mul(x, frozen).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 3]));
        assert!(g.get(frozen).is_none());
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn parents_precede_children() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0), true);
        let b = tape.scale(a, 2.0);
        let c = tape.add(a, b).unwrap();
        assert!(a < b && b < c);
        for (id, node) in tape.nodes.iter().enumerate() {
            assert!(node.parents.iter().all(|p| p.0 < id));
        }
    }

    #[test]
    fn seeded_backward_scales_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.3, -1.2]), true);
        let s = tape.sum(x);
        let g = tape.backward_scaled(s, 1024.0).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1024.0, 1024.0]);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.bce_with_logits(x, &t(&[1, 2], &[0.0, 0.5])).is_err());
    }
}
