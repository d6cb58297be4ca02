//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op executes eagerly and appends a node to the [`Tape`]. Nodes are
//! stored in execution order, which is a topological order of the graph, so
//! [`Tape::backward`] walks the node list back to front. A value consumed by
//! several ops receives the sum of all their gradient contributions.

use rand::Rng;

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f32>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// How a batch-norm op normalizes its input.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running estimates.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
        cols: Vec<f32>,
    },
    Linear {
        input: Var,
        weight: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    ExpGate {
        input: Var,
        gate: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records executed operations and runs the backward pass.
///
/// A tape is built for one forward/backward round and then dropped; it is not
/// reentrant.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// The exponential gate factor `1 - exp(-g^2)`.
///
/// Evaluated literally in `f32`: for `|g|` below roughly `1.7e-4` the
/// exponential rounds to one and the factor is exactly zero.
#[inline]
pub fn exp_gate_factor(g: f32) -> f32 {
    1.0 - (-g * g).exp()
}

/// `d/dg (1 - exp(-g^2)) = 2 g exp(-g^2)`.
#[inline]
pub fn exp_gate_slope(g: f32) -> f32 {
    2.0 * g * (-g * g).exp()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward caches are kept.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf without gradient tracking (inputs, labels, fixed tensors).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad && self.grad_enabled, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` for untracked values.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation without bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let x = self.value(input).shape();
        let w = self.value(weight).shape();
        if x.len() != 4 {
            return Err(TensorError::Rank { op: OP, expected: 4, found: x.to_vec() });
        }
        if w.len() != 4 {
            return Err(TensorError::Rank { op: OP, expected: 4, found: w.to_vec() });
        }
        if x[1] != w[1] {
            return Err(TensorError::DimensionMismatch {
                op: OP,
                axis: 1,
                what: "input channels",
                expected: w[1],
                found: x[1],
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: OP, message: "stride must be positive".into() });
        }
        let out_extent = |extent: usize, kernel: usize| -> Result<usize, TensorError> {
            let padded = extent + 2 * padding;
            if padded < kernel {
                return Err(TensorError::Window { op: OP, extent, kernel, padding, stride });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let geom = ConvGeometry {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            padding,
            out_h: out_extent(x[2], w[2])?,
            out_w: out_extent(x[3], w[3])?,
        };
        let cout = w[0];
        let k = geom.patch_len();
        let ncols = geom.cols();
        let mut cols = vec![0.0f32; k * ncols];
        kernels::im2col(self.value(input).data(), &geom, &mut cols);
        let mut tmp = vec![0.0f32; cout * ncols];
        kernels::gemm(cout, k, ncols, self.value(weight).data(), false, &cols, false, &mut tmp, false);
        let mut out = vec![0.0f32; cout * ncols];
        kernels::swap_outer(&tmp, cout, geom.batch, geom.out_plane(), &mut out);
        let value = Tensor::new(vec![geom.batch, cout, geom.out_h, geom.out_w], out)?;
        let tracked = self.tracked(&[input, weight]);
        if !tracked {
            cols = Vec::new();
        }
        Ok(self.push(value, tracked, Op::Conv2d { input, weight, geom, cols }))
    }

    /// `input[N,F] * weight[O,F]^T`, no bias.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let x = self.value(input).shape();
        let w = self.value(weight).shape();
        if x.len() != 2 {
            return Err(TensorError::Rank { op: OP, expected: 2, found: x.to_vec() });
        }
        if w.len() != 2 {
            return Err(TensorError::Rank { op: OP, expected: 2, found: w.to_vec() });
        }
        if x[1] != w[1] {
            return Err(TensorError::DimensionMismatch {
                op: OP,
                axis: 1,
                what: "input features",
                expected: w[1],
                found: x[1],
            });
        }
        let (n, f, o) = (x[0], x[1], w[0]);
        let mut out = vec![0.0f32; n * o];
        kernels::gemm(n, f, o, self.value(input).data(), false, self.value(weight).data(), true, &mut out, false);
        let value = Tensor::new(vec![n, o], out)?;
        let tracked = self.tracked(&[input, weight]);
        Ok(self.push(value, tracked, Op::Linear { input, weight }))
    }

    /// Per-channel normalization over every axis except axis 1, followed by
    /// the affine map `gamma * xhat + beta`. In training mode the batch
    /// statistics are returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        epsilon: f32,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        const OP: &str = "batch_norm";
        if !(epsilon > 0.0) {
            return Err(TensorError::Invalid { op: OP, message: format!("epsilon must be positive, got {epsilon}") });
        }
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank { op: OP, expected: 4, found: shape });
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (what, v) in [("gamma length", gamma), ("beta length", beta)] {
            let len = self.value(v).len();
            if len != c {
                return Err(TensorError::DimensionMismatch { op: OP, axis: 1, what, expected: len, found: c });
            }
        }
        let count = n * spatial;
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += x[(b * c + ch) * spatial..][..spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        sq += x[(b * c + ch) * spatial..][..spatial]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (sq / count as f64) as f32;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::DimensionMismatch {
                        op: OP,
                        axis: 1,
                        what: "running statistics length",
                        expected: c,
                        found: mean.len().min(var.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[input, gamma, beta]);
        if !tracked {
            xhat = Vec::new();
        }
        let train = stats.is_some();
        let v = self.push(value, tracked, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train });
        Ok((v, stats))
    }

    /// Exponential gating: channel `k` of `input` (axis 1) is multiplied by
    /// `1 - exp(-g_k^2)`.
    pub fn exp_gate(&mut self, input: Var, gate: Var) -> Result<Var, TensorError> {
        const OP: &str = "exp_gate";
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank { op: OP, expected: 2, found: shape });
        }
        let c = shape[1];
        let gl = self.value(gate).len();
        if gl != c {
            return Err(TensorError::DimensionMismatch { op: OP, axis: 1, what: "gate count", expected: gl, found: c });
        }
        let spatial: usize = shape[2..].iter().product();
        let factors: Vec<f32> = self.value(gate).data().iter().map(|&g| exp_gate_factor(g)).collect();
        let x = self.value(input).data();
        let mut out = vec![0.0f32; x.len()];
        for (i, (o, xs)) in out.chunks_mut(spatial).zip(x.chunks(spatial)).enumerate() {
            let f = factors[i % c];
            o.iter_mut().zip(xs).for_each(|(o, &v)| *o = v * f);
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[input, gate]);
        Ok(self.push(value, tracked, Op::ExpGate { input, gate }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f32> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[input]);
        self.push(value, tracked, Op::Relu { input })
    }

    /// Max pooling over the last two axes of an `[N,C,H,W]` tensor.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        const OP: &str = "max_pool2d";
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Rank { op: OP, expected: 4, found: shape });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Invalid { op: OP, message: "kernel and stride must be positive".into() });
        }
        let (h, w) = (shape[2], shape[3]);
        for extent in [h, w] {
            if extent < kernel {
                return Err(TensorError::Window { op: OP, extent, kernel, padding: 0, stride });
            }
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let planes = shape[0] * shape[1];
        let mut out = vec![0.0f32; planes * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        kernels::max_pool_forward(self.value(input).data(), planes, h, w, kernel, stride, &mut out, &mut argmax);
        let value = Tensor::new(vec![shape[0], shape[1], oh, ow], out)?;
        let tracked = self.tracked(&[input]);
        if !tracked {
            argmax = Vec::new();
        }
        Ok(self.push(value, tracked, Op::MaxPool { input, argmax }))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Rank { op: "global_avg_pool", expected: 4, found: shape });
        }
        let spatial = shape[2] * shape[3];
        let out: Vec<f32> = self
            .value(input)
            .data()
            .chunks(spatial)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, tracked, Op::GlobalAvgPool { input }))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, F]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let f: usize = shape[1..].iter().product();
        self.reshape(input, &[n, f])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshape(shape)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, tracked, Op::Reshape { input }))
    }

    /// Picks columns `indices` of an `[N,F]` tensor.
    pub fn gather_features(&mut self, input: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank { op: "gather_features", expected: 2, found: shape });
        }
        let value = self.value(input).select(1, indices)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, tracked, Op::Gather { input, indices: indices.to_vec() }))
    }

    /// Inverted dropout: zeroes each value with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f32, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid { op: "dropout", message: format!("rate {rate} outside [0, 1)") });
        }
        let x = self.value(input);
        let keep = 1.0 - rate;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f32> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, tracked, Op::Dropout { input, mask }))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank { op: OP, expected: 2, found: shape });
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(TensorError::DimensionMismatch { op: OP, axis: 0, what: "label count", expected: n, found: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::LabelOutOfRange { index, label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z[row * k..(row + 1) * k];
            let max = zr.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = zr.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_sum = sum.ln();
            total += log_sum - (zr[label] as f64 - max);
            for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(zr) {
                *p = ((v as f64 - max).exp() / sum) as f32;
            }
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(value, tracked, Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same("add", a, b)?;
        let out: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, tracked, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same("mul", a, b)?;
        let out: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, tracked, Op::Mul { a, b }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::scalar(s as f32), tracked, Op::Sum { input })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(TensorError::Rank { op, expected: sa.len(), found: sb.to_vec() });
        }
        if let Some(axis) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(TensorError::DimensionMismatch { op, axis, what: "operand extent", expected: sa[axis], found: sb[axis] });
        }
        Ok(())
    }

    /// Backpropagates from a one-element `loss`. Afterwards every tracked
    /// value recorded before `loss` has a gradient (zero if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                message: format!("loss must hold one element, shape is {:?}", self.value(loss).shape()),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Invalid { op: "backward", message: "loss does not depend on any tracked value".into() });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = self.nodes.split_at_mut(i);
            let node = &mut upper[0];
            let Some(grad) = node.grad.take() else { continue };
            if node.requires_grad {
                for (parent, contribution) in backward_step(&node.op, &node.value, &grad, lower) {
                    let p = &mut lower[parent.0];
                    match &mut p.grad {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            node.grad = Some(grad);
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

/// Gradient contributions of one node to its tracked parents.
fn backward_step(op: &Op, out: &Tensor, grad: &[f32], lower: &[Node]) -> Vec<(Var, Vec<f32>)> {
    let tracked = |v: &Var| lower[v.0].requires_grad;
    let val = |v: &Var| &lower[v.0].value;
    let mut contribs = Vec::with_capacity(2);
    match op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, geom, cols } => {
            let cout = val(weight).shape()[0];
            let k = geom.patch_len();
            let ncols = geom.cols();
            let mut g_t = vec![0.0f32; cout * ncols];
            kernels::swap_outer(grad, geom.batch, cout, geom.out_plane(), &mut g_t);
            if tracked(weight) {
                let mut gw = vec![0.0f32; cout * k];
                kernels::gemm(cout, ncols, k, &g_t, false, cols, true, &mut gw, false);
                contribs.push((*weight, gw));
            }
            if tracked(input) {
                let mut gcols = vec![0.0f32; k * ncols];
                kernels::gemm(k, cout, ncols, val(weight).data(), true, &g_t, false, &mut gcols, false);
                let mut gx = vec![0.0f32; val(input).len()];
                kernels::col2im(&gcols, geom, &mut gx);
                contribs.push((*input, gx));
            }
        }
        Op::Linear { input, weight } => {
            let (n, f) = (val(input).shape()[0], val(input).shape()[1]);
            let o = val(weight).shape()[0];
            if tracked(weight) {
                let mut gw = vec![0.0f32; o * f];
                kernels::gemm(o, n, f, grad, true, val(input).data(), false, &mut gw, false);
                contribs.push((*weight, gw));
            }
            if tracked(input) {
                let mut gx = vec![0.0f32; n * f];
                kernels::gemm(n, o, f, grad, false, val(weight).data(), false, &mut gx, false);
                contribs.push((*input, gx));
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
            let shape = out.shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let count = (n * spatial) as f32;
            let g = val(gamma).data();
            let mut sum_dy = vec![0.0f32; c];
            let mut sum_dy_xhat = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    let (mut s, mut sx) = (0.0f32, 0.0f32);
                    for i in off..off + spatial {
                        s += grad[i];
                        sx += grad[i] * xhat[i];
                    }
                    sum_dy[ch] += s;
                    sum_dy_xhat[ch] += sx;
                }
            }
            if tracked(gamma) {
                contribs.push((*gamma, sum_dy_xhat.clone()));
            }
            if tracked(beta) {
                contribs.push((*beta, sum_dy.clone()));
            }
            if tracked(input) {
                let mut gx = vec![0.0f32; grad.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        let scale = g[ch] * inv_std[ch];
                        for i in off..off + spatial {
                            gx[i] = if *train {
                                scale * (grad[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                            } else {
                                scale * grad[i]
                            };
                        }
                    }
                }
                contribs.push((*input, gx));
            }
        }
        Op::ExpGate { input, gate } => {
            let shape = out.shape();
            let c = shape[1];
            let spatial: usize = shape[2..].iter().product();
            let gv = val(gate).data();
            if tracked(gate) {
                let x = val(input).data();
                let mut acc = vec![0.0f64; c];
                for (i, (ds, xs)) in grad.chunks(spatial).zip(x.chunks(spatial)).enumerate() {
                    acc[i % c] += ds.iter().zip(xs).map(|(&d, &xv)| d * xv).sum::<f32>() as f64;
                }
                let gg: Vec<f32> = acc.iter().zip(gv).map(|(&a, &g)| a as f32 * exp_gate_slope(g)).collect();
                contribs.push((*gate, gg));
            }
            if tracked(input) {
                let factors: Vec<f32> = gv.iter().map(|&g| exp_gate_factor(g)).collect();
                let mut gx = vec![0.0f32; grad.len()];
                for (i, (o, ds)) in gx.chunks_mut(spatial).zip(grad.chunks(spatial)).enumerate() {
                    let f = factors[i % c];
                    o.iter_mut().zip(ds).for_each(|(o, &d)| *o = d * f);
                }
                contribs.push((*input, gx));
            }
        }
        Op::Relu { input } => {
            if tracked(input) {
                let gx = grad
                    .iter()
                    .zip(val(input).data())
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                contribs.push((*input, gx));
            }
        }
        Op::MaxPool { input, argmax } => {
            if tracked(input) {
                let s = val(input).shape();
                let planes = s[0] * s[1];
                let mut gx = vec![0.0f32; val(input).len()];
                kernels::max_pool_backward(grad, argmax, planes, s[2] * s[3], &mut gx);
                contribs.push((*input, gx));
            }
        }
        Op::GlobalAvgPool { input } => {
            if tracked(input) {
                let s = val(input).shape();
                let spatial = s[2] * s[3];
                let inv = 1.0 / spatial as f32;
                let gx = (0..val(input).len()).map(|i| grad[i / spatial] * inv).collect();
                contribs.push((*input, gx));
            }
        }
        Op::Reshape { input } => {
            if tracked(input) {
                contribs.push((*input, grad.to_vec()));
            }
        }
        Op::Gather { input, indices } => {
            if tracked(input) {
                let s = val(input).shape();
                let (n, f) = (s[0], s[1]);
                let m = indices.len();
                let mut gx = vec![0.0f32; n * f];
                for row in 0..n {
                    for (j, &src) in indices.iter().enumerate() {
                        gx[row * f + src] += grad[row * m + j];
                    }
                }
                contribs.push((*input, gx));
            }
        }
        Op::Dropout { input, mask } => {
            if tracked(input) {
                contribs.push((*input, grad.iter().zip(mask).map(|(d, m)| d * m).collect()));
            }
        }
        Op::SoftmaxCrossEntropy { logits, probs, labels } => {
            if tracked(logits) {
                let k = val(logits).shape()[1];
                let n = labels.len();
                let scale = grad[0] / n as f32;
                let mut gz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    gz[row * k + l] -= scale;
                }
                contribs.push((*logits, gz));
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if tracked(v) {
                    contribs.push((*v, grad.to_vec()));
                }
            }
        }
        Op::Mul { a, b } => {
            if tracked(a) {
                contribs.push((*a, grad.iter().zip(val(b).data()).map(|(d, y)| d * y).collect()));
            }
            if tracked(b) {
                contribs.push((*b, grad.iter().zip(val(a).data()).map(|(d, x)| d * x).collect()));
            }
        }
        Op::Sum { input } => {
            if tracked(input) {
                contribs.push((*input, vec![grad[0]; val(input).len()]));
            }
        }
    }
    contribs
}
