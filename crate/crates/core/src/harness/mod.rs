//! Experiment orchestration: presets and the `train`, `prune`, `finetune`,
//! `sweep`, `eval` and `report` commands.
//!
//! Commands talk to each other only through files in a run directory:
//!
//! | file                | written by |
//! |---------------------|------------|
//! | `config.txt`        | train      |
//! | `metrics.csv`       | train      |
//! | `model.ckpt`        | train      |
//! | `pruned.ckpt`       | prune      |
//! | `prune_report.json` | prune      |
//! | `finetuned.ckpt`    | finetune   |
//! | `result.json`       | finetune   |
//! | `sweep.csv`         | sweep      |

pub mod report;
pub mod train;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::{self, Checkpoint, DataError, Dataset, RunConfig};
use crate::gating::GateKind;
use crate::network::{build_bn_testnet, build_lenet5_caffe, Network};
use crate::prune::{self, FinetunePlan, PruneError, PruneReport};
use crate::regularization::RegularizerKind;
use train::{evaluate, EpochLog, TrainError, TrainSettings, Trainer};

pub use report::{cmd_report, Report, ReportRow};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const PRUNED_FILE: &str = "pruned.ckpt";
pub const PRUNE_REPORT_FILE: &str = "prune_report.json";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const RESULT_FILE: &str = "result.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Environment variable naming the MNIST directory.
pub const MNIST_DIR_ENV: &str = "MNIST_DIR";
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["l2", "l1", "bounded_l1", "bounded_l1_3e-3", "bounded_l1_smoke", "no_penalty"];

/// Gated LeNet5-Caffe runs: `l2` (λ2 = 5e-4, 200 epochs), `l1` (λ1 = 1e-3),
/// `bounded_l1` (λ1 = 4e-3), `bounded_l1_3e-3`, all 60 epochs with λ2 = 0;
/// a 20-epoch `bounded_l1_smoke`; and a 60-epoch `no_penalty` control.
pub fn preset(name: &str) -> Option<RunConfig> {
    let mut c = RunConfig { out_dir: PathBuf::from("runs").join(name), ..RunConfig::default() };
    match name {
        "l2" => {
            c.regularizer = RegularizerKind::L2;
            c.lambda1 = 0.0;
            c.weight_decay = 5e-4;
            c.epochs = 200;
            c.lr_milestones = vec![100, 150];
        }
        "l1" => {
            c.regularizer = RegularizerKind::L1;
            c.lambda1 = 1e-3;
        }
        "bounded_l1" => {}
        "bounded_l1_3e-3" => c.lambda1 = 3e-3,
        "bounded_l1_smoke" => {
            c.epochs = 20;
            c.lr_milestones = vec![10, 15];
        }
        "no_penalty" => {
            c.regularizer = RegularizerKind::L1;
            c.lambda1 = 0.0;
        }
        _ => return None,
    }
    Some(c)
}

/// Run configuration from an optional preset, an optional config file and
/// `key=value` overrides, applied in that order.
pub fn resolve_config(preset_name: Option<&str>, config_file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, HarnessError> {
    let mut cfg = match preset_name {
        Some(p) => preset(p).ok_or_else(|| HarnessError::Usage(format!("unknown preset `{p}` (one of {})", PRESETS.join(", "))))?,
        None => RunConfig::default(),
    };
    if let Some(path) = config_file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(HarnessError::Usage)?;
    }
    cfg.validate().map_err(HarnessError::Usage)?;
    Ok(cfg)
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR), PathBuf::from)
}

/// Train and test splits.
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let (train, test) = data_io::load_mnist(dir)?;
        Ok(Mnist { train, test })
    }

    /// Splits off the last `holdout` training samples for validation.
    pub fn finetune_split(&self, holdout: usize) -> (Dataset, Dataset) {
        let n = self.train.len();
        let cut = n.saturating_sub(holdout.min(n / 2));
        (self.train.slice(0, cut), self.train.slice(cut, n))
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<Network, HarnessError> {
    match cfg.model.as_str() {
        "lenet5_caffe" => {
            if cfg.gate_kind != GateKind::Exponential {
                return Err(HarnessError::Usage("lenet5_caffe has no batch norm, so only exponential gates apply".into()));
            }
            Ok(build_lenet5_caffe(true, cfg.seed))
        }
        "bn_testnet" => Ok(build_bn_testnet(cfg.gate_kind, 28, 10, cfg.seed)),
        other => Err(HarnessError::Usage(format!("unknown model `{other}` (lenet5_caffe|bn_testnet)"))),
    }
}

fn write_metrics(dir: &Path, logs: &[EpochLog]) -> Result<(), HarnessError> {
    let path = dir.join(METRICS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    train::write_epoch_logs(logs, file)?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<Vec<EpochLog>, HarnessError> {
    let path = dir.join(METRICS_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    Ok(train::read_epoch_logs(file)?)
}

fn log_metrics(log: &EpochLog) -> std::collections::BTreeMap<String, f64> {
    let mut m = std::collections::BTreeMap::new();
    m.insert("train_loss".into(), log.train_loss);
    m.insert("task_loss".into(), log.task_loss);
    m.insert("penalty".into(), log.penalty);
    m.insert("sigma".into(), log.sigma);
    m.insert("lambda".into(), log.lambda);
    m.insert("lr".into(), log.lr);
    if let Some(e) = log.test_error {
        m.insert("test_error".into(), e);
    }
    if let Some(r) = log.pruning_rate {
        m.insert("pruning_rate".into(), r);
    }
    m
}

/// Whether two configs train the same model; output location, pruning and
/// fine-tuning settings do not matter.
fn same_training(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| RunConfig {
        out_dir: PathBuf::new(),
        threshold: None,
        finetune_epochs: 0,
        finetune_lr: 0.0,
        finetune_holdout: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Outcome of [`cmd_train`].
pub struct TrainOutcome {
    pub network: Network,
    pub logs: Vec<EpochLog>,
    /// Epochs already present when the command started.
    pub resumed_from: usize,
}

/// Trains `cfg` into `cfg.out_dir`, saving the checkpoint and the metrics log
/// after every epoch. With `resume`, an unfinished run with the same training
/// settings continues from its last checkpoint, and a finished one is
/// returned as is.
///
/// `progress` sees every epoch's log once it is saved; returning
/// `ControlFlow::Break` stops early, leaving a resumable run behind.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Mnist,
    resume: bool,
    mut progress: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome, HarnessError> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_text = cfg.to_text();
    let settings = TrainSettings::from_config(cfg);
    let ckpt_path = dir.join(MODEL_FILE);

    let existing = if resume && ckpt_path.exists() {
        let ckpt = data_io::load_checkpoint(&ckpt_path)?;
        let saved = ckpt.config.as_deref().and_then(|t| RunConfig::from_text(t).ok());
        saved.is_some_and(|c| same_training(&c, cfg)).then_some(ckpt)
    } else {
        None
    };
    let (mut net, mut trainer, mut logs) = match existing {
        Some(ckpt) => {
            let mut logs = read_metrics(dir)?;
            logs.truncate(ckpt.epoch);
            let trainer = Trainer::resume(settings, ckpt.epoch, ckpt.velocity)?;
            (ckpt.network, trainer, logs)
        }
        None => {
            let path = dir.join(CONFIG_FILE);
            fs::write(&path, &config_text).map_err(io_err(&path))?;
            (build_model(cfg)?, Trainer::new(settings)?, Vec::new())
        }
    };
    let resumed_from = trainer.epochs_done();
    while !trainer.is_finished() {
        let log = trainer.train_epoch(&mut net, &data.train, Some(&data.test))?;
        logs.push(log);
        write_metrics(dir, &logs)?;
        let ckpt = Checkpoint {
            network: net.clone(),
            epoch: trainer.epochs_done(),
            seed: cfg.seed,
            regularizer: Some(cfg.regularizer_spec()),
            config: Some(config_text.clone()),
            metrics: log_metrics(logs.last().expect("just pushed")),
            report: None,
            velocity: Some(trainer.velocity().to_vec()),
        };
        data_io::save_checkpoint(&ckpt, &ckpt_path)?;
        if progress(logs.last().expect("just pushed")).is_break() {
            break;
        }
    }
    Ok(TrainOutcome { network: net, logs, resumed_from })
}

/// Outcome of [`cmd_prune`].
pub struct PruneOutcome {
    pub network: Network,
    pub report: PruneReport,
    /// Test error in percent of the pruned, merged network.
    pub test_error: f64,
}

/// Prunes a trained checkpoint (default `model.ckpt` of the run directory) at
/// `cfg.threshold()` and writes `pruned.ckpt` and `prune_report.json`.
pub fn cmd_prune(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Mnist) -> Result<PruneOutcome, HarnessError> {
    let src = checkpoint.map_or_else(|| cfg.out_dir.join(MODEL_FILE), Path::to_path_buf);
    let trained = data_io::load_checkpoint(&src)?;
    let (pruned, report) = prune::prune(&trained.network, cfg.threshold())?;
    let test_error = evaluate(&pruned, &data.test)?.error();
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut ckpt = Checkpoint::new(pruned.clone());
    ckpt.epoch = trained.epoch;
    ckpt.seed = trained.seed;
    ckpt.regularizer = trained.regularizer;
    ckpt.config = trained.config;
    ckpt.metrics.insert("test_error".into(), test_error);
    ckpt.report = Some(report.clone());
    data_io::save_checkpoint(&ckpt, &cfg.out_dir.join(PRUNED_FILE))?;
    let path = cfg.out_dir.join(PRUNE_REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
    Ok(PruneOutcome { network: pruned, report, test_error })
}

/// One finished pipeline run, as aggregated by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: String,
    pub method: RegularizerKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub report: PruneReport,
    /// Test error in percent before and after fine-tuning.
    pub error_before_ft: f64,
    pub error_after_ft: f64,
    pub finetune_epochs_used: usize,
}

pub fn finetune_settings(cfg: &RunConfig) -> TrainSettings {
    let mut s = TrainSettings::from_config(cfg);
    s.epochs = cfg.finetune_epochs;
    s.lr = cfg.finetune_lr;
    s.lr_milestones.clear();
    s.seed = cfg.seed.wrapping_add(1);
    s
}

/// Fine-tunes `pruned.ckpt` for at most `cfg.finetune_epochs` epochs without
/// penalty, keeping the snapshot with the best accuracy on the held-out part
/// of the training set. Writes `finetuned.ckpt` and `result.json`.
pub fn cmd_finetune(cfg: &RunConfig, data: &Mnist) -> Result<RunResult, HarnessError> {
    let src = cfg.out_dir.join(PRUNED_FILE);
    let pruned = data_io::load_checkpoint(&src)?;
    let report = pruned
        .report
        .clone()
        .ok_or_else(|| HarnessError::Usage(format!("{} carries no prune report", src.display())))?;
    let (ft_train, ft_val) = data.finetune_split(cfg.finetune_holdout);
    let ft = prune::finetune(&pruned.network, &ft_train, &ft_val, cfg.finetune_epochs, &finetune_settings(cfg))?;
    let error_before_ft = evaluate(&pruned.network, &data.test)?.error();
    let error_after_ft = evaluate(&ft.network, &data.test)?.error();
    let mut ckpt = pruned.clone();
    ckpt.network = ft.network;
    ckpt.velocity = None;
    ckpt.metrics.insert("test_error".into(), error_after_ft);
    ckpt.metrics.insert("finetune_best_epoch".into(), ft.best_epoch as f64);
    data_io::save_checkpoint(&ckpt, &cfg.out_dir.join(FINETUNED_FILE))?;
    let trained_cfg = match &pruned.config {
        Some(text) => RunConfig::from_text(text)?,
        None => cfg.clone(),
    };
    let result = RunResult {
        run: run_name(&cfg.out_dir),
        method: trained_cfg.regularizer,
        lambda1: trained_cfg.lambda1,
        lambda2: trained_cfg.weight_decay,
        epochs: trained_cfg.epochs,
        seed: trained_cfg.seed,
        report,
        error_before_ft,
        error_after_ft,
        finetune_epochs_used: ft.best_epoch,
    };
    let path = cfg.out_dir.join(RESULT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(io_err(&path))?;
    Ok(result)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Threshold sweep over a trained checkpoint; writes `sweep.csv`.
pub fn cmd_sweep(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    thresholds: &[f32],
    finetune_epochs: usize,
    data: &Mnist,
) -> Result<Vec<prune::SweepRow>, HarnessError> {
    let src = checkpoint.map_or_else(|| cfg.out_dir.join(MODEL_FILE), Path::to_path_buf);
    let trained = data_io::load_checkpoint(&src)?;
    let (ft_train, ft_val) = data.finetune_split(cfg.finetune_holdout);
    let plan = FinetunePlan { train: &ft_train, val: &ft_val, epochs: finetune_epochs, settings: finetune_settings(cfg) };
    let rows = prune::threshold_sweep(&trained.network, thresholds, &data.test, (finetune_epochs > 0).then_some(&plan))?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join(SWEEP_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    prune::write_sweep_csv(&rows, file)?;
    Ok(rows)
}

/// Test error in percent of any checkpoint.
pub fn cmd_eval(checkpoint: &Path, data: &Mnist) -> Result<f64, HarnessError> {
    let ckpt = data_io::load_checkpoint(checkpoint)?;
    Ok(evaluate(&ckpt.network, &data.test)?.error())
}
