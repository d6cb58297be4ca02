//! Mini-batch SGD training with gate penalties, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data_io::{Dataset, RunConfig};
use crate::network::{Mode, Network, NetworkError};
use crate::optim::Sgd;
use crate::prune;
use crate::regularization::{RegularizerKind, RegularizerSpec};
use crate::tensor::TensorError;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss (task {task}, penalty {penalty}) at epoch {epoch} batch {batch}; lr {lr}, lambda {lambda}, sigma {sigma}"
    )]
    NonFinite { epoch: usize, batch: usize, task: f64, penalty: f64, lr: f64, lambda: f64, sigma: f64 },
    #[error("invalid training settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer, schedule and penalty settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub regularizer: RegularizerSpec,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainSettings {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lr_milestones: cfg.lr_milestones.clone(),
            lr_gamma: cfg.lr_gamma,
            regularizer: cfg.regularizer_spec(),
            seed: cfg.seed,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Task loss plus penalty, averaged over the epoch's batches.
    pub train_loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    /// Test error in percent; empty when no test set was given.
    pub test_error: Option<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Pruning rate at the gate kind's default threshold; empty when the
    /// network has no groups or a group would be removed entirely.
    pub pruning_rate: Option<f64>,
}

/// Accuracy and mean loss over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
}

impl EvalResult {
    /// Accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }

    /// Error in percent.
    pub fn error(&self) -> f64 {
        100.0 - self.accuracy()
    }
}

/// Eval-mode accuracy and cross-entropy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<EvalResult, TrainError> {
    let mut correct = 0;
    let mut loss = 0.0f64;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let mut tape = Tape::no_grad();
        let xi = tape.constant(x);
        let out = net.forward(&mut tape, xi, Mode::Eval, None)?;
        let ce = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss += tape.value(ce).data()[0] as f64 * chunk.len() as f64;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(EvalResult { correct, total: data.len(), loss: loss / data.len().max(1) as f64 })
}

/// Seed of the shuffling/dropout stream for one epoch, so that a resumed run
/// draws the same batches as an uninterrupted one.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stateful trainer: owns the optimizer and knows how many epochs are done.
pub struct Trainer {
    pub settings: TrainSettings,
    opt: Sgd,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(settings: TrainSettings) -> Result<Self, TrainError> {
        settings.regularizer.validate().map_err(|e| TrainError::Settings(e.to_string()))?;
        if settings.batch_size == 0 {
            return Err(TrainError::Settings("batch size must be positive".into()));
        }
        let opt = Sgd::new(settings.lr as f32, settings.momentum as f32, settings.weight_decay as f32);
        Ok(Trainer { settings, opt, epochs_done: 0 })
    }

    /// Continues a run after `epochs_done` epochs with saved momentum buffers.
    pub fn resume(settings: TrainSettings, epochs_done: usize, velocity: Option<Vec<Vec<f32>>>) -> Result<Self, TrainError> {
        let mut t = Trainer::new(settings)?;
        t.epochs_done = epochs_done;
        if let Some(v) = velocity {
            t.opt.set_velocity(v);
        }
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        self.opt.velocity()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.settings.epochs
    }

    /// Runs one epoch over `train` and, if given, evaluates on `test`.
    pub fn train_epoch(&mut self, net: &mut Network, train: &Dataset, test: Option<&Dataset>) -> Result<EpochLog, TrainError> {
        let e = self.epochs_done;
        let spec = &self.settings.regularizer;
        let (lr, lambda, sigma) = (self.settings.lr_at(e), spec.lambda_at(e), spec.sigma_at(e));
        self.opt.lr = lr as f32;
        let slots = net.param_slots();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.settings.seed, e));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let (mut task_sum, mut penalty_sum) = (0.0f64, 0.0f64);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.settings.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let fwd = net.forward(&mut tape, xi, Mode::Train, Some(&mut rng))?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let task = tape.value(loss).data()[0] as f64;
            let penalty = spec.penalty((0..net.groups.len()).map(|g| net.gate_params(g)), e);
            if !task.is_finite() || !penalty.is_finite() {
                return Err(TrainError::NonFinite { epoch: e + 1, batch: b, task, penalty, lr, lambda, sigma });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = fwd
                .params
                .iter()
                .map(|&v| tape.take_grad(v).expect("parameters are tracked"))
                .collect();
            drop(tape);
            if spec.kind != RegularizerKind::L2 {
                for (slot, grad) in slots.iter().zip(grads.iter_mut()) {
                    if let Some(g) = slot.gate_of {
                        spec.add_penalty_grad(net.gate_params(g), grad, e);
                    }
                }
            }
            net.update_running_stats(&fwd.bn_stats);
            let mut params: Vec<&mut [f32]> = net.params_mut().into_iter().map(|t| t.data_mut()).collect();
            self.opt.step(&mut params, &grads);
            task_sum += task;
            penalty_sum += penalty;
            batches += 1;
        }
        self.epochs_done += 1;

        let batches = batches.max(1) as f64;
        let test_error = match test {
            Some(t) => Some(evaluate(net, t)?.error()),
            None => None,
        };
        let pruning_rate = net
            .gate_kind()
            .and_then(|k| prune::prune(net, k.default_threshold()).ok())
            .map(|(_, r)| r.pruning_rate());
        Ok(EpochLog {
            epoch: e + 1,
            train_loss: (task_sum + penalty_sum) / batches,
            task_loss: task_sum / batches,
            penalty: penalty_sum / batches,
            test_error,
            sigma,
            lambda,
            lr,
            pruning_rate,
        })
    }
}

/// Writes epoch logs as CSV.
pub fn write_epoch_logs<W: std::io::Write>(logs: &[EpochLog], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in logs {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epoch_logs<R: std::io::Read>(input: R) -> Result<Vec<EpochLog>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
