//! Per-channel multiplicative gates.
//!
//! Exponential gates scale channel `k` by `1 − exp(−g_k²)`, a value in
//! `[0, 1)`. Linear gates are the scale `γ` of a batch-norm layer; they carry
//! no parameters of their own and only appear here for uniform pruning
//! bookkeeping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Initial value of every exponential gate parameter `g`.
pub const EXP_GATE_INIT: f32 = 1.0;
/// Initial BN scale when that scale acts as a linear gate.
pub const LINEAR_GATE_BN_INIT: f32 = 0.5;
/// Initial BN scale in networks gated exponentially.
pub const EXP_GATE_BN_INIT: f32 = 1.0;

/// Default pruning threshold on exponential gate values.
pub const EXP_DEFAULT_THRESHOLD: f32 = 0.0;
/// Default pruning threshold on `|γ|` of linear gates.
pub const LINEAR_DEFAULT_THRESHOLD: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Exponential,
    Linear,
}

impl GateKind {
    pub fn default_threshold(self) -> f32 {
        match self {
            GateKind::Exponential => EXP_DEFAULT_THRESHOLD,
            GateKind::Linear => LINEAR_DEFAULT_THRESHOLD,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::Exponential => "exponential",
            GateKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for GateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exponential" | "exp" => Ok(GateKind::Exponential),
            "linear" | "lin" => Ok(GateKind::Linear),
            other => Err(format!("unknown gate kind `{other}` (expected exponential|linear)")),
        }
    }
}

/// Multiplier applied to a channel by a gate with parameter `param`.
pub fn gate_factor(kind: GateKind, param: f32) -> f32 {
    match kind {
        GateKind::Exponential => autodiff::exp_gate_factor(param),
        GateKind::Linear => param,
    }
}

/// The scalar compared against the pruning threshold: `1 − exp(−g²)` for
/// exponential gates, `|γ|` for linear gates.
pub fn gate_value(kind: GateKind, param: f32) -> f32 {
    match kind {
        GateKind::Exponential => autodiff::exp_gate_factor(param),
        GateKind::Linear => param.abs(),
    }
}

/// A gate over `channel_count` channels.
///
/// For [`GateKind::Linear`] the parameters are a copy of the associated BN
/// scale; the network keeps the BN layer as the single owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLayer {
    pub kind: GateKind,
    pub params: Tensor,
}

impl GateLayer {
    pub fn exponential(channels: usize) -> Self {
        GateLayer {
            kind: GateKind::Exponential,
            params: Tensor::full(&[channels], EXP_GATE_INIT),
        }
    }

    pub fn linear_view(bn_scale: &Tensor) -> Self {
        GateLayer {
            kind: GateKind::Linear,
            params: bn_scale.clone(),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, k: usize) -> f32 {
        gate_value(self.kind, self.params.data()[k])
    }

    pub fn values(&self) -> Vec<f32> {
        self.params.data().iter().map(|&p| gate_value(self.kind, p)).collect()
    }

    pub fn factors(&self) -> Vec<f32> {
        self.params.data().iter().map(|&p| gate_factor(self.kind, p)).collect()
    }
}

/// Applies a gate whose parameters live on the tape as `params` to the
/// channel axis (axis 1) of `x`.
pub fn gate_forward(tape: &mut Tape, x: Var, params: Var, kind: GateKind) -> Result<Var, TensorError> {
    match kind {
        GateKind::Exponential => tape.exp_gate(x, params),
        GateKind::Linear => {
            let channels = tape.value(x).shape().get(1).copied().unwrap_or(0);
            let gates = tape.value(params).len();
            if channels != gates {
                return Err(TensorError::DimensionMismatch {
                    op: "gate_forward",
                    axis: 1,
                    what: "gate count",
                    expected: gates,
                    found: channels,
                });
            }
            Ok(x)
        }
    }
}
