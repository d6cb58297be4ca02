//! Sparsity penalties on gate parameters and their epoch schedules.
//!
//! * `l1`: `λ Σ |θ| / σ`
//! * `bounded_l1`: `λ Σ 1 − exp(−|θ|/σ)`
//! * `l2`: realized as weight decay in the optimizer; the penalty term is zero.
//!
//! Penalties only ever see gate parameters, never convolution or linear
//! weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norms::{self, BoundedNormParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegularizerError {
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("sigma must be finite and positive, got {0}")]
    Sigma(f64),
    #[error("invalid sigma schedule: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L2,
    L1,
    BoundedL1,
}

impl RegularizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::L2 => "l2",
            RegularizerKind::L1 => "l1",
            RegularizerKind::BoundedL1 => "bounded_l1",
        }
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(RegularizerKind::L2),
            "l1" => Ok(RegularizerKind::L1),
            "bounded_l1" => Ok(RegularizerKind::BoundedL1),
            other => Err(format!("unknown regularizer `{other}` (expected l2|l1|bounded_l1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `initial · rate^epoch`
    ExpDecay,
    /// Linear steps of `step_delta` down to `floor`, then `floor · rate^k`.
    StepThenExp,
}

/// Epoch-indexed σ schedule. Produces a positive, non-increasing sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub initial: f64,
    pub mode: ScheduleMode,
    pub decay_rate: f64,
    pub step_delta: f64,
    pub floor: f64,
}

impl SigmaSchedule {
    pub fn exp_decay(initial: f64, decay_rate: f64) -> Self {
        SigmaSchedule {
            initial,
            mode: ScheduleMode::ExpDecay,
            decay_rate,
            step_delta: 0.0,
            floor: 0.0,
        }
    }

    pub fn step_then_exp(initial: f64, step_delta: f64, floor: f64, decay_rate: f64) -> Self {
        SigmaSchedule {
            initial,
            mode: ScheduleMode::StepThenExp,
            decay_rate,
            step_delta,
            floor,
        }
    }

    pub fn validate(&self) -> Result<(), RegularizerError> {
        let bad = |m: String| Err(RegularizerError::Schedule(m));
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            return bad(format!("initial sigma {} must be positive", self.initial));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay rate {} must lie in (0, 1]", self.decay_rate));
        }
        if self.mode == ScheduleMode::StepThenExp {
            if !(self.step_delta >= 0.0) || !self.step_delta.is_finite() {
                return bad(format!("step delta {} must be non-negative", self.step_delta));
            }
            if !(self.floor > 0.0 && self.floor <= self.initial) {
                return bad(format!("floor {} must lie in (0, initial]", self.floor));
            }
        }
        Ok(())
    }

    /// First epoch at which the linear phase sits on the floor.
    fn floor_epoch(&self) -> Option<usize> {
        if self.initial <= self.floor {
            return Some(0);
        }
        if self.step_delta <= 0.0 {
            return None;
        }
        // tolerate representation error in (initial - floor) / delta
        let steps = (self.initial - self.floor) / self.step_delta;
        Some((steps - 1e-9).ceil().max(0.0) as usize)
    }

    pub fn sigma_at(&self, epoch: usize) -> f64 {
        match self.mode {
            ScheduleMode::ExpDecay => self.initial * self.decay_rate.powf(epoch as f64),
            ScheduleMode::StepThenExp => match self.floor_epoch() {
                Some(fe) if epoch >= fe => self.floor * self.decay_rate.powf((epoch - fe) as f64),
                _ => (self.initial - self.step_delta * epoch as f64).max(self.floor),
            },
        }
    }
}

/// Switches λ to `lambda` from `epoch` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStep {
    pub epoch: usize,
    pub lambda: f64,
}

/// Choice and strength of the gate penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda1: f64,
    /// σ used when no schedule is set.
    pub sigma: f64,
    pub sigma_schedule: Option<SigmaSchedule>,
    pub lambda_schedule: Vec<LambdaStep>,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::L2,
            lambda1: 0.0,
            sigma: 1.0,
            sigma_schedule: None,
            lambda_schedule: Vec::new(),
        }
    }
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda1: f64) -> Self {
        RegularizerSpec {
            kind,
            lambda1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegularizerError> {
        for lambda in std::iter::once(self.lambda1).chain(self.lambda_schedule.iter().map(|s| s.lambda)) {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(RegularizerError::Lambda(lambda));
            }
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(RegularizerError::Sigma(self.sigma));
        }
        if let Some(s) = &self.sigma_schedule {
            s.validate()?;
        }
        Ok(())
    }

    pub fn sigma_at(&self, epoch: usize) -> f64 {
        self.sigma_schedule.map_or(self.sigma, |s| s.sigma_at(epoch))
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        self.lambda_schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .max_by_key(|s| s.epoch)
            .map_or(self.lambda1, |s| s.lambda)
    }

    /// The penalty term for the σ and λ in effect at `epoch`.
    pub fn penalty<'a>(&self, gates: impl IntoIterator<Item = &'a [f32]>, epoch: usize) -> f64 {
        penalty(self.kind, self.lambda_at(epoch), self.sigma_at(epoch), gates)
    }

    /// Adds the penalty gradient for one gate tensor onto `grad`.
    pub fn add_penalty_grad(&self, gate: &[f32], grad: &mut [f32], epoch: usize) {
        let g = penalty_grad(self.kind, self.lambda_at(epoch), self.sigma_at(epoch), gate);
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// `λ Σ|θ|/σ` (l1), `λ Σ 1 − exp(−|θ|/σ)` (bounded l1), `0` (l2).
pub fn penalty<'a>(kind: RegularizerKind, lambda: f64, sigma: f64, gates: impl IntoIterator<Item = &'a [f32]>) -> f64 {
    match kind {
        RegularizerKind::L2 => 0.0,
        RegularizerKind::L1 => {
            let s: f64 = gates.into_iter().flatten().map(|&v| v.abs() as f64).sum();
            lambda * s / sigma
        }
        RegularizerKind::BoundedL1 => {
            let params = BoundedNormParams::new(1.0, sigma).expect("validated sigma");
            let s: f64 = gates.into_iter().map(|g| norms::bounded_norm(g, params) as f64).sum();
            lambda * s
        }
    }
}

/// `λ·sign(θ)/σ` (l1) or `λ·sign(θ)·exp(−|θ|/σ)/σ` (bounded l1); zero for l2.
pub fn penalty_grad(kind: RegularizerKind, lambda: f64, sigma: f64, gate: &[f32]) -> Vec<f32> {
    match kind {
        RegularizerKind::L2 => vec![0.0; gate.len()],
        RegularizerKind::L1 => {
            let scale = (lambda / sigma) as f32;
            gate.iter().map(|&v| if v == 0.0 { 0.0 } else { scale * v.signum() }).collect()
        }
        RegularizerKind::BoundedL1 => {
            let params = BoundedNormParams::new(1.0, sigma).expect("validated sigma");
            norms::bounded_norm_grad(gate, params).into_iter().map(|g| lambda as f32 * g).collect()
        }
    }
}
