use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;

use bprune::harness::{self, HarnessError, Mnist, MODEL_FILE, PRESETS};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bprune", version, about = "Train, prune and report gated LeNet5-Caffe runs on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file with `key=value` lines, applied after the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named run configuration (l2, l1, bounded_l1, ...).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pruning threshold; defaults to 0 for exponential gates, 1e-4 for linear.
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// Run directory (for `report`: the directory holding the runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated network and log per-epoch metrics.
    Train {
        /// Continue an unfinished run with the same config.
        #[arg(long)]
        resume: bool,
    },
    /// Threshold, compact and merge gates of a trained checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Penalty-free fine-tuning of the pruned checkpoint.
    Finetune,
    /// Prune at several thresholds and record pruning rate and accuracy.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0f32, 1e-5, 1e-4, 1e-3])]
        thresholds: Vec<f32>,
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
    },
    /// Test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize every finished run below `--out` (default `runs`).
    Report,
}

fn config(common: &Common) -> Result<bprune::data_io::RunConfig, HarnessError> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("train.seed".to_string(), seed.to_string()));
    }
    if let Some(t) = common.threshold {
        overrides.push(("prune.threshold".to_string(), t.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out_dir".to_string(), out.display().to_string()));
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    harness::resolve_config(common.preset.as_deref(), common.config.as_deref(), &overrides)
}

fn load_data() -> Result<Mnist, HarnessError> {
    let dir = harness::mnist_dir();
    eprintln!("loading MNIST from {}", dir.display());
    Mnist::load(&dir)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Report => {
            let dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let report = harness::cmd_report(&dir, &PRESETS[..3])?;
            print!("{}", report.to_markdown());
        }
        Command::Train { resume } => {
            let cfg = config(&cli.common)?;
            let data = load_data()?;
            let out = harness::cmd_train(&cfg, &data, resume, |log| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  task {:.4}  penalty {:.4}  test_err {:.2}%  sigma {}  lr {}  pruning_rate {}",
                    log.epoch,
                    log.train_loss,
                    log.task_loss,
                    log.penalty,
                    log.test_error.unwrap_or(f64::NAN),
                    log.sigma,
                    log.lr,
                    log.pruning_rate.map_or("-".into(), |r| format!("{r:.4}")),
                );
                ControlFlow::Continue(())
            })?;
            if out.resumed_from > 0 {
                eprintln!("resumed after epoch {}", out.resumed_from);
            }
            println!("{}", cfg.out_dir.join(MODEL_FILE).display());
        }
        Command::Prune { checkpoint } => {
            let cfg = config(&cli.common)?;
            let data = load_data()?;
            let out = harness::cmd_prune(&cfg, checkpoint.as_deref(), &data)?;
            let r = &out.report;
            println!("signature {}", r.signature);
            println!("params {} -> {} (pruning rate {:.4})", r.params_before, r.params_after, r.pruning_rate());
            println!("flops {} -> {} ({})", r.flops_before, r.flops_after, r.flop_convention);
            println!("test error {:.2}%", out.test_error);
        }
        Command::Finetune => {
            let cfg = config(&cli.common)?;
            let data = load_data()?;
            let r = harness::cmd_finetune(&cfg, &data)?;
            println!("signature {}", r.report.signature);
            println!(
                "test error {:.2}% -> {:.2}% (best after {} epochs)",
                r.error_before_ft, r.error_after_ft, r.finetune_epochs_used
            );
        }
        Command::Sweep { checkpoint, thresholds, finetune_epochs } => {
            let cfg = config(&cli.common)?;
            let data = load_data()?;
            let rows = harness::cmd_sweep(&cfg, checkpoint.as_deref(), &thresholds, finetune_epochs, &data)?;
            bprune::prune::write_sweep_csv(&rows, std::io::stdout()).map_err(HarnessError::Csv)?;
        }
        Command::Eval { checkpoint } => {
            let cfg = config(&cli.common)?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE));
            let data = load_data()?;
            println!("test error {:.2}%", harness::cmd_eval(&path, &data)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
