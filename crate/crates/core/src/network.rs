//! Gated networks as ordered layer lists plus prunable-group metadata.
//!
//! A [`PrunableGroup`] ties one gate to the weight slices that depend on the
//! gated channel: the producer's output slice, per-channel followers such as
//! batch norm, and the input slices of consumer layers. Removing channel `k`
//! of a group removes all of these together, which keeps every shape
//! consistent.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::gating::{self, GateKind, GateLayer};
use crate::tensor::{Tensor, TensorError};

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        name: String,
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    Linear {
        name: String,
        weight: Tensor,
    },
    BatchNorm {
        name: String,
        gamma: Tensor,
        beta: Tensor,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        momentum: f32,
        epsilon: f32,
    },
    Gate {
        name: String,
        gate: GateLayer,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Flattens `[N, ...]` to `[N, F]`, optionally keeping only the listed
    /// features (set by compaction of a flatten group).
    Flatten {
        select: Option<Vec<usize>>,
    },
    Dropout {
        rate: f32,
    },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Linear { .. } => "linear",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Gate { .. } => "gate",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "max_pool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten { .. } => "flatten",
            Layer::Dropout { .. } => "dropout",
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d { name, .. }
            | Layer::Linear { name, .. }
            | Layer::BatchNorm { name, .. }
            | Layer::Gate { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Trainable tensors of this layer, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => vec![weight],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Gate { gate, .. } => vec![&gate.params],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => vec![weight],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Gate { gate, .. } => vec![&mut gate.params],
            _ => Vec::new(),
        }
    }
}

/// Which parameters act as the gate of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateRef {
    /// A [`Layer::Gate`] with exponential kind.
    Exponential { layer: usize },
    /// The scale `γ` of a [`Layer::BatchNorm`].
    BnScale { layer: usize },
}

impl GateRef {
    pub fn kind(&self) -> GateKind {
        match self {
            GateRef::Exponential { .. } => GateKind::Exponential,
            GateRef::BnScale { .. } => GateKind::Linear,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            GateRef::Exponential { layer } | GateRef::BnScale { layer } => layer,
        }
    }
}

/// Where the gated channels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    /// Output axis (axis 0 of the weight) of a conv or linear layer.
    Layer(usize),
    /// Features of a flatten layer. Feature `f` of the unselected flatten
    /// output belongs to channel `f / spatial` of the `upstream` group.
    Flatten {
        layer: usize,
        upstream: Option<usize>,
        spatial: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableGroup {
    pub name: String,
    pub gate: GateRef,
    pub producer: Producer,
    /// Per-channel layers between producer and consumers (batch norm).
    pub followers: Vec<usize>,
    /// Conv or linear layers whose input axis (axis 1) is indexed by the
    /// group's channels.
    pub consumers: Vec<usize>,
}

/// Result of a forward pass.
pub struct Forward {
    pub logits: Var,
    /// Tape handle of every parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Training-mode batch statistics per batch-norm layer index.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Role of a parameter tensor, in [`Network::params`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    /// Index inside [`Layer::params`].
    pub slot: usize,
    /// Group whose gate this tensor is, if any.
    pub gate_of: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub groups: Vec<PrunableGroup>,
}

impl Network {
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for slot in 0..layer.params().len() {
                let gate_of = self.groups.iter().position(|g| match g.gate {
                    GateRef::Exponential { layer } => layer == li && slot == 0,
                    GateRef::BnScale { layer } => layer == li && slot == 0,
                });
                slots.push(ParamSlot { layer: li, slot, gate_of });
            }
        }
        slots
    }

    pub fn gate_kind(&self) -> Option<GateKind> {
        self.groups.first().map(|g| g.gate.kind())
    }

    pub fn group_channels(&self, group: usize) -> usize {
        self.gate_params(group).len()
    }

    /// The raw gate parameters (`g` or BN `γ`) of a group.
    pub fn gate_params(&self, group: usize) -> &[f32] {
        match self.groups[group].gate {
            GateRef::Exponential { layer } => match &self.layers[layer] {
                Layer::Gate { gate, .. } => gate.params.data(),
                other => panic!("group gate points at a {} layer", other.kind_name()),
            },
            GateRef::BnScale { layer } => match &self.layers[layer] {
                Layer::BatchNorm { gamma, .. } => gamma.data(),
                other => panic!("group gate points at a {} layer", other.kind_name()),
            },
        }
    }

    pub fn gate_params_mut(&mut self, group: usize) -> &mut [f32] {
        match self.groups[group].gate {
            GateRef::Exponential { layer } => match &mut self.layers[layer] {
                Layer::Gate { gate, .. } => gate.params.data_mut(),
                other => panic!("group gate points at a {} layer", other.kind_name()),
            },
            GateRef::BnScale { layer } => match &mut self.layers[layer] {
                Layer::BatchNorm { gamma, .. } => gamma.data_mut(),
                other => panic!("group gate points at a {} layer", other.kind_name()),
            },
        }
    }

    pub fn gate_layer(&self, group: usize) -> GateLayer {
        GateLayer {
            kind: self.groups[group].gate.kind(),
            params: Tensor::from_vec(self.gate_params(group).to_vec()),
        }
    }

    /// Kept-channel counts per group, joined with dashes.
    pub fn signature(&self) -> String {
        (0..self.groups.len())
            .map(|g| self.group_channels(g).to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Checks the group metadata against the layer list.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Invalid(m));
        let mut gate_owner = vec![None; self.layers.len()];
        for (gi, g) in self.groups.iter().enumerate() {
            let gl = g.gate.layer();
            match (g.gate, self.layers.get(gl)) {
                (GateRef::Exponential { .. }, Some(Layer::Gate { gate, .. })) if gate.kind == GateKind::Exponential => {}
                (GateRef::BnScale { .. }, Some(Layer::BatchNorm { .. })) => {}
                _ => return bad(format!("group {} gate does not reference a matching layer", g.name)),
            }
            if let Some(prev) = gate_owner[gl].replace(gi) {
                return bad(format!("gate layer {gl} belongs to groups {prev} and {gi}"));
            }
            let c = self.group_channels(gi);
            match g.producer {
                Producer::Layer(p) => match self.layers.get(p) {
                    Some(Layer::Conv2d { weight, .. }) | Some(Layer::Linear { weight, .. }) if weight.shape()[0] == c => {}
                    _ => return bad(format!("group {} producer {p} does not emit {c} channels", g.name)),
                },
                Producer::Flatten { layer, upstream, .. } => {
                    if !matches!(self.layers.get(layer), Some(Layer::Flatten { .. })) {
                        return bad(format!("group {} flatten producer {layer} is not a flatten layer", g.name));
                    }
                    if upstream.is_some_and(|u| u >= gi) {
                        return bad(format!("group {} upstream group must precede it", g.name));
                    }
                }
            }
            for &f in &g.followers {
                match self.layers.get(f) {
                    Some(Layer::BatchNorm { gamma, .. }) if gamma.len() == c => {}
                    _ => return bad(format!("group {} follower {f} is not a {c}-channel batch norm", g.name)),
                }
            }
            for &cons in &g.consumers {
                match self.layers.get(cons) {
                    Some(Layer::Conv2d { weight, .. }) | Some(Layer::Linear { weight, .. }) if weight.shape()[1] == c => {}
                    _ => return bad(format!("group {} consumer {cons} does not take {c} inputs", g.name)),
                }
            }
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if let Layer::Gate { gate, name } = layer {
                if gate.kind == GateKind::Exponential && gate_owner[li].is_none() {
                    return bad(format!("gate layer {name} belongs to no group"));
                }
            }
        }
        Ok(())
    }

    /// Runs the network on `input` (`[N, C, H, W]`). Parameters are
    /// registered on the tape as tracked leaves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward, NetworkError> {
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut x = input;
        for (li, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv2d { weight, stride, padding, .. } => {
                    let w = tape.param(weight.clone());
                    params.push(w);
                    tape.conv2d(x, w, *stride, *padding)?
                }
                Layer::Linear { weight, .. } => {
                    let w = tape.param(weight.clone());
                    params.push(w);
                    tape.linear(x, w)?
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, epsilon, .. } => {
                    let g = tape.param(gamma.clone());
                    let b = tape.param(beta.clone());
                    params.push(g);
                    params.push(b);
                    let bn_mode = match mode {
                        Mode::Train => BatchNormMode::Train,
                        Mode::Eval => BatchNormMode::Eval { mean: running_mean, var: running_var },
                    };
                    let (y, stats) = tape.batch_norm(x, g, b, bn_mode, *epsilon)?;
                    if let Some(s) = stats {
                        bn_stats.push((li, s));
                    }
                    y
                }
                Layer::Gate { gate, .. } => {
                    let g = tape.param(gate.params.clone());
                    params.push(g);
                    gating::gate_forward(tape, x, g, gate.kind)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool2d { kernel, stride } => tape.max_pool2d(x, *kernel, *stride)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten { select } => {
                    let flat = tape.flatten(x)?;
                    match select {
                        Some(idx) => tape.gather_features(flat, idx)?,
                        None => flat,
                    }
                }
                Layer::Dropout { rate } => match mode {
                    Mode::Eval => x,
                    Mode::Train => {
                        let r = rng.as_deref_mut().ok_or_else(|| {
                            NetworkError::Invalid("training-mode dropout needs a random source".into())
                        })?;
                        tape.dropout(x, *rate, r)?
                    }
                },
            };
        }
        Ok(Forward { logits: x, params, bn_stats })
    }

    /// Folds training-mode batch statistics into the running estimates.
    /// The running variance uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (li, s) in stats {
            if let Layer::BatchNorm { running_mean, running_var, momentum, .. } = &mut self.layers[*li] {
                let unbias = if s.count > 1 { s.count as f32 / (s.count - 1) as f32 } else { 1.0 };
                for c in 0..running_mean.len() {
                    running_mean[c] = (1.0 - *momentum) * running_mean[c] + *momentum * s.mean[c];
                    running_var[c] = (1.0 - *momentum) * running_var[c] + *momentum * s.var[c] * unbias;
                }
            }
        }
    }

    /// Eval-mode logits for a batch of inputs.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NetworkError> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, Mode::Eval, None)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Uniform init in `±sqrt(6 / fan_in)`.
fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn conv(name: &str, cout: usize, cin: usize, k: usize, padding: usize, rng: &mut impl Rng) -> Layer {
    Layer::Conv2d {
        name: name.into(),
        weight: kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
        stride: 1,
        padding,
    }
}

fn linear(name: &str, out: usize, inp: usize, rng: &mut impl Rng) -> Layer {
    Layer::Linear {
        name: name.into(),
        weight: kaiming_uniform(&[out, inp], inp, rng),
    }
}

fn gate(name: &str, channels: usize) -> Layer {
    Layer::Gate {
        name: name.into(),
        gate: GateLayer::exponential(channels),
    }
}

fn batch_norm(name: &str, channels: usize, gamma_init: f32) -> Layer {
    Layer::BatchNorm {
        name: name.into(),
        gamma: Tensor::full(&[channels], gamma_init),
        beta: Tensor::zeros(&[channels]),
        running_mean: vec![0.0; channels],
        running_var: vec![1.0; channels],
        momentum: BN_MOMENTUM,
        epsilon: BN_EPSILON,
    }
}

/// LeNet5-Caffe (20-50-800-500) on `1x28x28` inputs, without biases or BN.
///
/// With `gated`, exponential gates follow conv1, conv2, the flattened
/// 800-feature vector and fc1, giving four prunable groups.
pub fn build_lenet5_caffe(gated: bool, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut groups = Vec::new();
    let push_group = |layers: &Vec<Layer>, groups: &mut Vec<PrunableGroup>, name: &str, producer, consumers| {
        groups.push(PrunableGroup {
            name: name.into(),
            gate: GateRef::Exponential { layer: layers.len() - 1 },
            producer,
            followers: Vec::new(),
            consumers,
        });
    };

    layers.push(conv("conv1", 20, 1, 5, 0, &mut rng)); // 0
    if gated {
        layers.push(gate("gate1", 20));
        push_group(&layers, &mut groups, "conv1", Producer::Layer(0), Vec::new());
    }
    layers.push(Layer::Relu);
    layers.push(Layer::MaxPool2d { kernel: 2, stride: 2 });
    let conv2 = layers.len();
    layers.push(conv("conv2", 50, 20, 5, 0, &mut rng));
    if gated {
        groups[0].consumers.push(conv2);
        layers.push(gate("gate2", 50));
        push_group(&layers, &mut groups, "conv2", Producer::Layer(conv2), Vec::new());
    }
    layers.push(Layer::Relu);
    layers.push(Layer::MaxPool2d { kernel: 2, stride: 2 });
    let flatten = layers.len();
    layers.push(Layer::Flatten { select: None });
    let fc1 = if gated { flatten + 2 } else { flatten + 1 };
    if gated {
        layers.push(gate("gate_flat", 800));
        let producer = Producer::Flatten { layer: flatten, upstream: Some(1), spatial: 16 };
        push_group(&layers, &mut groups, "flatten", producer, vec![fc1]);
    }
    layers.push(linear("fc1", 500, 800, &mut rng));
    if gated {
        layers.push(gate("gate_fc1", 500));
        push_group(&layers, &mut groups, "fc1", Producer::Layer(fc1), Vec::new());
    }
    layers.push(Layer::Relu);
    let fc2 = layers.len();
    layers.push(linear("fc2", 10, 500, &mut rng));
    if gated {
        groups[3].consumers.push(fc2);
    }
    Network {
        arch: "lenet5_caffe".into(),
        input_shape: [1, 28, 28],
        layers,
        groups,
    }
}

/// Small BN-bearing CNN: three `conv3x3 → [gate] → BN → ReLU` blocks with
/// 8, 16 and 16 channels, global average pooling and a linear head.
///
/// With [`GateKind::Linear`] there are no gate layers; each group's gate is
/// the BN scale of its block.
pub fn build_bn_testnet(kind: GateKind, input_hw: usize, classes: usize, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [8usize, 16, 16];
    let gamma_init = match kind {
        GateKind::Exponential => gating::EXP_GATE_BN_INIT,
        GateKind::Linear => gating::LINEAR_GATE_BN_INIT,
    };
    let mut layers = Vec::new();
    let mut groups: Vec<PrunableGroup> = Vec::new();
    let mut cin = 1;
    for (b, &w) in widths.iter().enumerate() {
        let conv_idx = layers.len();
        if let Some(prev) = groups.last_mut() {
            prev.consumers.push(conv_idx);
        }
        layers.push(conv(&format!("conv{}", b + 1), w, cin, 3, 1, &mut rng));
        let gate_ref = match kind {
            GateKind::Exponential => {
                layers.push(gate(&format!("gate{}", b + 1), w));
                GateRef::Exponential { layer: layers.len() - 1 }
            }
            GateKind::Linear => GateRef::BnScale { layer: layers.len() },
        };
        let bn_idx = layers.len();
        layers.push(batch_norm(&format!("bn{}", b + 1), w, gamma_init));
        layers.push(Layer::Relu);
        groups.push(PrunableGroup {
            name: format!("block{}", b + 1),
            gate: gate_ref,
            producer: Producer::Layer(conv_idx),
            followers: vec![bn_idx],
            consumers: Vec::new(),
        });
        cin = w;
    }
    layers.push(Layer::GlobalAvgPool);
    let head = layers.len();
    groups.last_mut().expect("three blocks").consumers.push(head);
    layers.push(linear("head", classes, cin, &mut rng));
    Network {
        arch: format!("bn_testnet_{}", kind.as_str()),
        input_shape: [1, input_hw, input_hw],
        layers,
        groups,
    }
}
