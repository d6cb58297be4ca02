//! Channel selection, physical compaction, gate merging and the
//! parameter/FLOP accounting behind pruning reports.
//!
//! A prune is `select_channels → compact → merge_gates`. Selection keeps a
//! channel iff its gate value is strictly above the threshold, so threshold
//! zero removes exactly the channels whose gate is exactly zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::Dataset;
use crate::gating::GateKind;
use crate::harness::train::{evaluate, TrainError, TrainSettings, Trainer};
use crate::network::{GateRef, Layer, Network, NetworkError, Producer};
use crate::tensor::TensorError;

/// Upper bound on fine-tuning epochs after a prune.
pub const MAX_FINETUNE_EPOCHS: usize = 3;

/// Written in the accuracy columns of a sweep row whose threshold would
/// disconnect the network.
pub const DEAD_ROW: &str = "removes all channels";

/// How FLOPs are counted; written into every report.
pub const FLOP_CONVENTION: &str = "multiply-add = 2 FLOPs; conv 2*kh*kw*Cin*Cout*Hout*Wout, linear 2*In*Out";

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("threshold must be a non-negative number, got {0}")]
    Threshold(f32),
    #[error("group `{group}` would lose all {channels} channels at threshold {threshold}")]
    DeadLayer { group: String, channels: usize, threshold: f32 },
    #[error("selection does not fit the network: {0}")]
    Selection(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("fine-tuning is limited to {MAX_FINETUNE_EPOCHS} epochs, got {0}")]
    FinetuneEpochs(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Kept and removed channel indices of one group, both ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSelection {
    pub group: String,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub threshold: f32,
    pub groups: Vec<GroupSelection>,
}

impl Selection {
    pub fn signature(&self) -> String {
        self.groups.iter().map(|g| g.kept.len().to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn channels_total(&self) -> usize {
        self.groups.iter().map(|g| g.kept.len() + g.removed.len()).sum()
    }

    pub fn channels_removed(&self) -> usize {
        self.groups.iter().map(|g| g.removed.len()).sum()
    }

    /// Fraction of all gated channels that are removed.
    pub fn channel_fraction_removed(&self) -> f64 {
        let total = self.channels_total();
        if total == 0 {
            0.0
        } else {
            self.channels_removed() as f64 / total as f64
        }
    }
}

/// Feature index (in the unselected flatten output) of each current unit.
fn flatten_features(net: &Network, layer: usize, units: usize) -> Vec<usize> {
    match &net.layers[layer] {
        Layer::Flatten { select: Some(idx) } => idx.clone(),
        _ => (0..units).collect(),
    }
}

/// Splits every group into kept (`value > threshold`) and removed channels.
///
/// A flatten unit is also removed when the upstream channel it reads from is
/// removed.
pub fn select_channels(net: &Network, threshold: f32) -> Result<Selection, PruneError> {
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(PruneError::Threshold(threshold));
    }
    let mut groups: Vec<GroupSelection> = Vec::with_capacity(net.groups.len());
    for (gi, group) in net.groups.iter().enumerate() {
        let gate = net.gate_layer(gi);
        let values = gate.values();
        let mut alive: Vec<bool> = values.iter().map(|&v| v > threshold).collect();
        if let Producer::Flatten { layer, upstream: Some(up), spatial } = group.producer {
            let up_removed: BTreeSet<usize> = groups[up].removed.iter().copied().collect();
            for (u, f) in flatten_features(net, layer, values.len()).into_iter().enumerate() {
                if up_removed.contains(&(f / spatial)) {
                    alive[u] = false;
                }
            }
        }
        let (kept, removed): (Vec<usize>, Vec<usize>) = (0..alive.len()).partition(|&k| alive[k]);
        if kept.is_empty() {
            return Err(PruneError::DeadLayer {
                group: group.name.clone(),
                channels: alive.len(),
                threshold,
            });
        }
        groups.push(GroupSelection {
            group: group.name.clone(),
            kept,
            removed,
        });
    }
    Ok(Selection { threshold, groups })
}

fn check_selection(net: &Network, sel: &Selection) -> Result<(), PruneError> {
    if sel.groups.len() != net.groups.len() {
        return Err(PruneError::Selection(format!(
            "{} groups selected, network has {}",
            sel.groups.len(),
            net.groups.len()
        )));
    }
    for (gi, gs) in sel.groups.iter().enumerate() {
        let name = &net.groups[gi].name;
        if &gs.group != name {
            return Err(PruneError::Selection(format!("group {gi} is `{name}`, selection says `{}`", gs.group)));
        }
        let c = net.group_channels(gi);
        let mut all: Vec<usize> = gs.kept.iter().chain(&gs.removed).copied().collect();
        all.sort_unstable();
        if all != (0..c).collect::<Vec<_>>() || !gs.kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(PruneError::Selection(format!(
                "group `{name}`: kept and removed must partition 0..{c} with kept ascending"
            )));
        }
        if gs.kept.is_empty() {
            return Err(PruneError::DeadLayer { group: name.clone(), channels: c, threshold: sel.threshold });
        }
    }
    Ok(())
}

fn slice_batch_norm(layer: &mut Layer, kept: &[usize]) -> Result<(), PruneError> {
    match layer {
        Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
            *gamma = gamma.select(0, kept)?;
            *beta = beta.select(0, kept)?;
            *running_mean = kept.iter().map(|&k| running_mean[k]).collect();
            *running_var = kept.iter().map(|&k| running_var[k]).collect();
            Ok(())
        }
        other => Err(PruneError::Selection(format!("expected batch norm, found {}", other.kind_name()))),
    }
}

fn weight_mut(layer: &mut Layer) -> Result<&mut crate::Tensor, PruneError> {
    match layer {
        Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => Ok(weight),
        other => Err(PruneError::Selection(format!("expected conv or linear, found {}", other.kind_name()))),
    }
}

/// Physically removes the unselected channels: producer output slices,
/// batch-norm parameters and running statistics, gate parameters and
/// consumer input slices.
pub fn compact(net: &Network, sel: &Selection) -> Result<Network, PruneError> {
    check_selection(net, sel)?;
    let mut out = net.clone();
    for (gi, group) in net.groups.iter().enumerate() {
        let kept = &sel.groups[gi].kept;
        match group.producer {
            Producer::Layer(p) => {
                let w = weight_mut(&mut out.layers[p])?;
                *w = w.select(0, kept)?;
            }
            Producer::Flatten { layer, upstream, spatial } => {
                let old = flatten_features(net, layer, net.group_channels(gi));
                let mut select = Vec::with_capacity(kept.len());
                for &u in kept {
                    let f = old[u];
                    let new_f = match upstream {
                        Some(up) => {
                            let rank = sel.groups[up].kept.binary_search(&(f / spatial)).map_err(|_| {
                                PruneError::Selection(format!(
                                    "group `{}` keeps unit {u} whose upstream channel {} is removed",
                                    group.name,
                                    f / spatial
                                ))
                            })?;
                            rank * spatial + f % spatial
                        }
                        None => f,
                    };
                    select.push(new_f);
                }
                out.layers[layer] = Layer::Flatten { select: Some(select) };
            }
        }
        let mut per_channel: BTreeSet<usize> = group.followers.iter().copied().collect();
        match group.gate {
            GateRef::Exponential { layer } => {
                if let Layer::Gate { gate, .. } = &mut out.layers[layer] {
                    gate.params = gate.params.select(0, kept)?;
                }
            }
            GateRef::BnScale { layer } => {
                per_channel.insert(layer);
            }
        }
        for li in per_channel {
            slice_batch_norm(&mut out.layers[li], kept)?;
        }
        for &c in &group.consumers {
            let w = weight_mut(&mut out.layers[c])?;
            *w = w.select(1, kept)?;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Folds every exponential gate into adjacent weights and deletes the gate
/// layers. Linear (BN-scale) gates are already part of the BN layer and are
/// left as they are.
///
/// Without BN the factor scales the producer's output slice, or for a
/// flatten group the consumer's input columns. With a following BN the
/// factor is folded into that BN's running statistics and scale so eval
/// outputs are unchanged; channels with factor exactly zero are zeroed in the
/// producer instead.
pub fn merge_gates(net: &Network) -> Result<Network, PruneError> {
    let mut out = net.clone();
    let mut removed_layers = Vec::new();
    let mut removed_groups = Vec::new();
    for (gi, group) in net.groups.iter().enumerate() {
        let GateRef::Exponential { layer: gate_layer } = group.gate else {
            continue;
        };
        let factors = net.gate_layer(gi).factors();
        let bn = group.followers.iter().copied().find(|&f| matches!(net.layers[f], Layer::BatchNorm { .. }));
        match (bn, group.producer) {
            (Some(bn), producer) => {
                let zero_mask: Vec<f32> = factors.iter().map(|&f| if f == 0.0 { 0.0 } else { 1.0 }).collect();
                match producer {
                    Producer::Layer(p) => weight_mut(&mut out.layers[p])?.scale_axis(0, &zero_mask)?,
                    Producer::Flatten { .. } => {
                        for &c in &group.consumers {
                            weight_mut(&mut out.layers[c])?.scale_axis(1, &zero_mask)?;
                        }
                    }
                }
                if let Layer::BatchNorm { gamma, running_mean, running_var, epsilon, .. } = &mut out.layers[bn] {
                    let gamma = gamma.data_mut();
                    for (k, &f) in factors.iter().enumerate() {
                        if f == 0.0 {
                            continue;
                        }
                        let (f, eps) = (f as f64, *epsilon as f64);
                        let var = running_var[k] as f64;
                        let new_var = var / (f * f);
                        running_mean[k] = (running_mean[k] as f64 / f) as f32;
                        running_var[k] = new_var as f32;
                        gamma[k] = (gamma[k] as f64 * f * (new_var + eps).sqrt() / (var + eps).sqrt()) as f32;
                    }
                }
            }
            (None, Producer::Layer(p)) => weight_mut(&mut out.layers[p])?.scale_axis(0, &factors)?,
            (None, Producer::Flatten { .. }) => {
                if group.consumers.is_empty() {
                    return Err(PruneError::Selection(format!("flatten group `{}` has no consumer", group.name)));
                }
                for &c in &group.consumers {
                    weight_mut(&mut out.layers[c])?.scale_axis(1, &factors)?;
                }
            }
        }
        removed_layers.push(gate_layer);
        removed_groups.push(gi);
    }
    removed_layers.sort_unstable();
    let remap_layer = |li: usize| li - removed_layers.iter().filter(|&&r| r < li).count();
    let remap_group = |gi: usize| {
        if removed_groups.contains(&gi) {
            None
        } else {
            Some(gi - removed_groups.iter().filter(|&&r| r < gi).count())
        }
    };
    out.layers = out
        .layers
        .into_iter()
        .enumerate()
        .filter(|(li, _)| !removed_layers.contains(li))
        .map(|(_, l)| l)
        .collect();
    out.groups = net
        .groups
        .iter()
        .enumerate()
        .filter(|(gi, _)| !removed_groups.contains(gi))
        .map(|(_, g)| {
            let mut g = g.clone();
            g.gate = match g.gate {
                GateRef::Exponential { layer } => GateRef::Exponential { layer: remap_layer(layer) },
                GateRef::BnScale { layer } => GateRef::BnScale { layer: remap_layer(layer) },
            };
            g.producer = match g.producer {
                Producer::Layer(p) => Producer::Layer(remap_layer(p)),
                Producer::Flatten { layer, upstream, spatial } => Producer::Flatten {
                    layer: remap_layer(layer),
                    upstream: upstream.and_then(remap_group),
                    spatial,
                },
            };
            g.followers = g.followers.iter().map(|&f| remap_layer(f)).collect();
            g.consumers = g.consumers.iter().map(|&c| remap_layer(c)).collect();
            g
        })
        .collect();
    out.validate()?;
    Ok(out)
}

/// Weights plus BN scale/shift plus gate parameters. Running statistics are
/// buffers, not parameters.
pub fn count_params(net: &Network) -> usize {
    net.params().iter().map(|t| t.len()).sum()
}

/// FLOPs of one forward pass on a single `[C, H, W]` input, see
/// [`FLOP_CONVENTION`].
pub fn count_flops(net: &Network, input_shape: [usize; 3]) -> Result<u64, PruneError> {
    let mut shape: Vec<usize> = input_shape.to_vec();
    let mut flops = 0u64;
    for layer in &net.layers {
        match layer {
            Layer::Conv2d { weight, stride, padding, .. } => {
                let w = weight.shape();
                if shape.len() != 3 || shape[0] != w[1] {
                    return Err(PruneError::Selection(format!("conv expects {} input channels, got {shape:?}", w[1])));
                }
                let ho = (shape[1] + 2 * padding - w[2]) / stride + 1;
                let wo = (shape[2] + 2 * padding - w[3]) / stride + 1;
                flops += 2 * (w[2] * w[3] * w[1] * w[0] * ho * wo) as u64;
                shape = vec![w[0], ho, wo];
            }
            Layer::Linear { weight, .. } => {
                let w = weight.shape();
                flops += 2 * (w[0] * w[1]) as u64;
                shape = vec![w[0]];
            }
            Layer::MaxPool2d { kernel, stride } => {
                shape = vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1];
            }
            Layer::GlobalAvgPool => shape = vec![shape[0]],
            Layer::Flatten { select } => {
                let n = select.as_ref().map_or_else(|| shape.iter().product(), |s| s.len());
                shape = vec![n];
            }
            Layer::BatchNorm { .. } | Layer::Gate { .. } | Layer::Relu | Layer::Dropout { .. } => {}
        }
    }
    Ok(flops)
}

/// Kept channels of one group in a [`PruneReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub original: usize,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub arch: String,
    pub gate_kind: GateKind,
    pub threshold: f32,
    pub groups: Vec<GroupReport>,
    pub signature: String,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flop_convention: String,
}

impl PruneReport {
    /// `1 − params_after / params_before`.
    pub fn pruning_rate(&self) -> f64 {
        pruning_rate(self.params_before, self.params_after)
    }

    pub fn channel_fraction_removed(&self) -> f64 {
        let total: usize = self.groups.iter().map(|g| g.original).sum();
        let kept: usize = self.groups.iter().map(|g| g.kept.len()).sum();
        if total == 0 {
            0.0
        } else {
            1.0 - kept as f64 / total as f64
        }
    }
}

pub fn pruning_rate(params_before: usize, params_after: usize) -> f64 {
    if params_before == 0 {
        0.0
    } else {
        1.0 - params_after as f64 / params_before as f64
    }
}

/// Selects, compacts and merges; the "before" counts are those of the
/// unpruned network with its gates merged.
pub fn prune(net: &Network, threshold: f32) -> Result<(Network, PruneReport), PruneError> {
    let gate_kind = net
        .gate_kind()
        .ok_or_else(|| PruneError::Selection(format!("network `{}` has no prunable groups", net.arch)))?;
    let sel = select_channels(net, threshold)?;
    let pruned = merge_gates(&compact(net, &sel)?)?;
    let reference = merge_gates(net)?;
    let report = PruneReport {
        arch: net.arch.clone(),
        gate_kind,
        threshold,
        groups: sel
            .groups
            .iter()
            .map(|g| GroupReport {
                group: g.group.clone(),
                original: g.kept.len() + g.removed.len(),
                kept: g.kept.clone(),
            })
            .collect(),
        signature: sel.signature(),
        params_before: count_params(&reference),
        params_after: count_params(&pruned),
        flops_before: count_flops(&reference, net.input_shape)?,
        flops_after: count_flops(&pruned, net.input_shape)?,
        flop_convention: FLOP_CONVENTION.into(),
    };
    Ok((pruned, report))
}

/// A fine-tuned network and the epoch it was taken from (0 = unchanged).
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub network: Network,
    pub best_epoch: usize,
    /// Validation accuracy in percent of the returned network.
    pub val_accuracy: f64,
}

/// Trains a pruned network for up to [`MAX_FINETUNE_EPOCHS`] epochs without
/// any gate penalty and returns the snapshot with the best validation
/// accuracy, the starting point included.
pub fn finetune(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    settings: &TrainSettings,
) -> Result<Finetuned, PruneError> {
    if epochs > MAX_FINETUNE_EPOCHS {
        return Err(PruneError::FinetuneEpochs(epochs));
    }
    let mut best = Finetuned {
        network: net.clone(),
        best_epoch: 0,
        val_accuracy: if epochs == 0 { f64::NAN } else { evaluate(net, val)?.accuracy() },
    };
    if epochs == 0 {
        return Ok(best);
    }
    let mut settings = settings.clone();
    settings.epochs = epochs;
    settings.regularizer.lambda1 = 0.0;
    settings.regularizer.lambda_schedule.clear();
    let mut trainer = Trainer::new(settings)?;
    let mut current = net.clone();
    while !trainer.is_finished() {
        trainer.train_epoch(&mut current, train, None)?;
        let acc = evaluate(&current, val)?.accuracy();
        if acc > best.val_accuracy {
            best = Finetuned { network: current.clone(), best_epoch: trainer.epochs_done(), val_accuracy: acc };
        }
    }
    Ok(best)
}

/// Training data and settings for the optional fine-tune step of a sweep.
pub struct FinetunePlan<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub epochs: usize,
    pub settings: TrainSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub pruning_rate: f64,
    pub params_after: usize,
    pub flops_after: u64,
    /// Test accuracy in percent of the pruned, merged network.
    pub accuracy_before_ft: f64,
    pub accuracy_after_ft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f32,
    /// `Err(group)` when the threshold removes every channel of `group`.
    pub outcome: Result<SweepPoint, String>,
}

/// Prunes `net` at every threshold, optionally fine-tunes, and evaluates on
/// `test`.
pub fn threshold_sweep(
    net: &Network,
    thresholds: &[f32],
    test: &Dataset,
    finetune_plan: Option<&FinetunePlan<'_>>,
) -> Result<Vec<SweepRow>, PruneError> {
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let outcome = match prune(net, threshold) {
            Err(PruneError::DeadLayer { group, .. }) => Err(group),
            Err(e) => return Err(e),
            Ok((pruned, report)) => {
                let accuracy_before_ft = evaluate(&pruned, test)?.accuracy();
                let accuracy_after_ft = match finetune_plan {
                    Some(plan) => {
                        let ft = finetune(&pruned, plan.train, plan.val, plan.epochs, &plan.settings)?;
                        Some(evaluate(&ft.network, test)?.accuracy())
                    }
                    None => None,
                };
                Ok(SweepPoint {
                    pruning_rate: report.pruning_rate(),
                    params_after: report.params_after,
                    flops_after: report.flops_after,
                    accuracy_before_ft,
                    accuracy_after_ft,
                })
            }
        };
        rows.push(SweepRow { threshold, outcome });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 6] =
    ["threshold", "pruning_rate", "params_after", "flops_after", "accuracy_before_ft", "accuracy_after_ft"];

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for row in rows {
        let t = row.threshold.to_string();
        match &row.outcome {
            Ok(p) => w.write_record([
                t,
                p.pruning_rate.to_string(),
                p.params_after.to_string(),
                p.flops_after.to_string(),
                p.accuracy_before_ft.to_string(),
                p.accuracy_after_ft.map_or(String::new(), |a| a.to_string()),
            ])?,
            Err(group) => w.write_record([
                t,
                String::new(),
                String::new(),
                String::new(),
                format!("{DEAD_ROW} ({group})"),
                format!("{DEAD_ROW} ({group})"),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}
