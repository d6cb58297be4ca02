//! Flat `key=value` run configuration with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! model=lenet5_caffe
//! regularizer.kind=bounded_l1
//! regularizer.lambda1=4e-3
//! optim.lr_milestones=30,45
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use super::DataError;
use crate::gating::GateKind;
use crate::regularization::{LambdaStep, RegularizerKind, RegularizerSpec, ScheduleMode, SigmaSchedule};

/// Splits config text into `(line number, key, value)` triples.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DataError::Config {
            line: i + 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(DataError::Config { line: i + 1, message: "empty key".into() });
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub gate_kind: GateKind,
    pub regularizer: RegularizerKind,
    pub lambda1: f64,
    pub lambda_schedule: Vec<LambdaStep>,
    /// σ when no schedule is set.
    pub sigma: f64,
    pub sigma_schedule: Option<ScheduleMode>,
    pub sigma_initial: f64,
    pub sigma_decay_rate: f64,
    pub sigma_step: f64,
    pub sigma_floor: f64,
    /// λ2, applied as SGD weight decay on every parameter.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub seed: u64,
    /// Pruning threshold; the gate kind's default when unset.
    pub threshold: Option<f32>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Training samples held out to pick the best fine-tuned model.
    pub finetune_holdout: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "lenet5_caffe".into(),
            gate_kind: GateKind::Exponential,
            regularizer: RegularizerKind::BoundedL1,
            lambda1: 4e-3,
            lambda_schedule: Vec::new(),
            sigma: 1.0,
            sigma_schedule: None,
            sigma_initial: 2.0,
            sigma_decay_rate: 0.99,
            sigma_step: 0.02,
            sigma_floor: 0.2,
            weight_decay: 0.0,
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            lr_milestones: vec![30, 45],
            lr_gamma: 0.1,
            seed: 0,
            threshold: None,
            finetune_epochs: 3,
            finetune_lr: 1e-3,
            finetune_holdout: 5000,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "model" => self.model = value.to_string(),
            "gate_kind" => self.gate_kind = value.parse()?,
            "regularizer.kind" => self.regularizer = value.parse()?,
            "regularizer.lambda1" => self.lambda1 = parse(key, value)?,
            "regularizer.lambda_schedule" => {
                self.lambda_schedule = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|item| {
                        let (e, l) = item.split_once(':').ok_or(format!("{key}: expected epoch:lambda, found `{item}`"))?;
                        Ok(LambdaStep { epoch: parse(key, e)?, lambda: parse(key, l)? })
                    })
                    .collect::<Result<_, String>>()?
            }
            "regularizer.sigma" => self.sigma = parse(key, value)?,
            "regularizer.sigma_schedule" => {
                self.sigma_schedule = match value {
                    "none" => None,
                    "exp_decay" => Some(ScheduleMode::ExpDecay),
                    "step_then_exp" => Some(ScheduleMode::StepThenExp),
                    other => return Err(format!("{key}: unknown schedule `{other}` (none|exp_decay|step_then_exp)")),
                }
            }
            "regularizer.sigma_initial" => self.sigma_initial = parse(key, value)?,
            "regularizer.sigma_decay_rate" => self.sigma_decay_rate = parse(key, value)?,
            "regularizer.sigma_step" => self.sigma_step = parse(key, value)?,
            "regularizer.sigma_floor" => self.sigma_floor = parse(key, value)?,
            "optim.weight_decay" => self.weight_decay = parse(key, value)?,
            "optim.lr" => self.lr = parse(key, value)?,
            "optim.momentum" => self.momentum = parse(key, value)?,
            "optim.lr_milestones" => self.lr_milestones = parse_list(key, value)?,
            "optim.lr_gamma" => self.lr_gamma = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "prune.threshold" => {
                self.threshold = if value == "default" { None } else { Some(parse(key, value)?) }
            }
            "finetune.epochs" => self.finetune_epochs = parse(key, value)?,
            "finetune.lr" => self.finetune_lr = parse(key, value)?,
            "finetune.holdout" => self.finetune_holdout = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Applies config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), DataError> {
        for (line, key, value) in parse_config(text)? {
            self.set(&key, &value).map_err(|message| DataError::Config { line, message })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key, one per line; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let schedule = match self.sigma_schedule {
            None => "none",
            Some(ScheduleMode::ExpDecay) => "exp_decay",
            Some(ScheduleMode::StepThenExp) => "step_then_exp",
        };
        let lambda_schedule: Vec<String> = self.lambda_schedule.iter().map(|s| format!("{}:{}", s.epoch, s.lambda)).collect();
        let threshold = self.threshold.map_or("default".to_string(), |t| t.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("model", self.model.clone()),
            ("gate_kind", self.gate_kind.as_str().into()),
            ("regularizer.kind", self.regularizer.as_str().into()),
            ("regularizer.lambda1", self.lambda1.to_string()),
            ("regularizer.lambda_schedule", lambda_schedule.join(",")),
            ("regularizer.sigma", self.sigma.to_string()),
            ("regularizer.sigma_schedule", schedule.into()),
            ("regularizer.sigma_initial", self.sigma_initial.to_string()),
            ("regularizer.sigma_decay_rate", self.sigma_decay_rate.to_string()),
            ("regularizer.sigma_step", self.sigma_step.to_string()),
            ("regularizer.sigma_floor", self.sigma_floor.to_string()),
            ("optim.weight_decay", self.weight_decay.to_string()),
            ("optim.lr", self.lr.to_string()),
            ("optim.momentum", self.momentum.to_string()),
            ("optim.lr_milestones", join(&self.lr_milestones)),
            ("optim.lr_gamma", self.lr_gamma.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("prune.threshold", threshold),
            ("finetune.epochs", self.finetune_epochs.to_string()),
            ("finetune.lr", self.finetune_lr.to_string()),
            ("finetune.holdout", self.finetune_holdout.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn regularizer_spec(&self) -> RegularizerSpec {
        let sigma_schedule = self.sigma_schedule.map(|mode| match mode {
            ScheduleMode::ExpDecay => SigmaSchedule::exp_decay(self.sigma_initial, self.sigma_decay_rate),
            ScheduleMode::StepThenExp => {
                SigmaSchedule::step_then_exp(self.sigma_initial, self.sigma_step, self.sigma_floor, self.sigma_decay_rate)
            }
        });
        RegularizerSpec {
            kind: self.regularizer,
            lambda1: self.lambda1,
            sigma: self.sigma,
            sigma_schedule,
            lambda_schedule: self.lambda_schedule.clone(),
        }
    }

    pub fn threshold(&self) -> f32 {
        self.threshold.unwrap_or_else(|| self.gate_kind.default_threshold())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.regularizer_spec().validate().map_err(|e| e.to_string())?;
        if self.batch_size == 0 {
            return Err("train.batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(format!(
                "optimizer settings out of range: lr {} momentum {} weight_decay {}",
                self.lr, self.momentum, self.weight_decay
            ));
        }
        if self.threshold.is_some_and(|t| !(t >= 0.0)) {
            return Err("prune.threshold must be non-negative".into());
        }
        Ok(())
    }
}
