//! Checkpoint container:
//!
//! ```text
//! u8       format version
//! u64 LE   manifest length in bytes
//! [u8]     manifest (JSON)
//! [f32 LE] tensor blobs, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::gating::{GateKind, GateLayer};
use crate::network::{Layer, Network, PrunableGroup};
use crate::prune::PruneReport;
use crate::regularization::RegularizerSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

/// A network plus everything needed to report on it or resume training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Completed training epochs.
    pub epoch: usize,
    pub seed: u64,
    pub regularizer: Option<RegularizerSpec>,
    /// The run configuration as `key=value` text.
    pub config: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub report: Option<PruneReport>,
    /// Optimizer momentum buffers, in parameter order.
    pub velocity: Option<Vec<Vec<f32>>>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            epoch: 0,
            seed: 0,
            regularizer: None,
            config: None,
            metrics: BTreeMap::new(),
            report: None,
            velocity: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Conv2d { name: String, stride: usize, padding: usize },
    Linear { name: String },
    BatchNorm { name: String, momentum: f32, epsilon: f32 },
    Gate { name: String, gate_kind: GateKind },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten { select: Option<Vec<usize>> },
    Dropout { rate: f32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    groups: Vec<PrunableGroup>,
    epoch: usize,
    seed: u64,
    regularizer: Option<RegularizerSpec>,
    config: Option<String>,
    metrics: BTreeMap<String, f64>,
    report: Option<PruneReport>,
    velocity_tensors: Option<usize>,
    blobs: Vec<BlobEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    entries: Vec<BlobEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], data: &[f32]) {
        let start = self.bytes.len();
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        let sha256 = sha256_hex(&self.bytes[start..]);
        self.entries.push(BlobEntry { name, shape: shape.to_vec(), sha256 });
    }
}

/// Writes `ckpt` to a temporary sibling file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DataError> {
    let net = &ckpt.network;
    let mut blobs = BlobWriter { entries: Vec::new(), bytes: Vec::new() };
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let spec = match layer {
            Layer::Conv2d { name, weight, stride, padding } => {
                blobs.push(format!("{i}.weight"), weight.shape(), weight.data());
                LayerSpec::Conv2d { name: name.clone(), stride: *stride, padding: *padding }
            }
            Layer::Linear { name, weight } => {
                blobs.push(format!("{i}.weight"), weight.shape(), weight.data());
                LayerSpec::Linear { name: name.clone() }
            }
            Layer::BatchNorm { name, gamma, beta, running_mean, running_var, momentum, epsilon } => {
                blobs.push(format!("{i}.gamma"), gamma.shape(), gamma.data());
                blobs.push(format!("{i}.beta"), beta.shape(), beta.data());
                blobs.push(format!("{i}.running_mean"), &[running_mean.len()], running_mean);
                blobs.push(format!("{i}.running_var"), &[running_var.len()], running_var);
                LayerSpec::BatchNorm { name: name.clone(), momentum: *momentum, epsilon: *epsilon }
            }
            Layer::Gate { name, gate } => {
                blobs.push(format!("{i}.gate"), gate.params.shape(), gate.params.data());
                LayerSpec::Gate { name: name.clone(), gate_kind: gate.kind }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2d { kernel, stride } => LayerSpec::MaxPool2d { kernel: *kernel, stride: *stride },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Flatten { select } => LayerSpec::Flatten { select: select.clone() },
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
        };
        layers.push(spec);
    }
    if let Some(velocity) = &ckpt.velocity {
        for (j, v) in velocity.iter().enumerate() {
            blobs.push(format!("velocity.{j}"), &[v.len()], v);
        }
    }
    let manifest = Manifest {
        arch: net.arch.clone(),
        input_shape: net.input_shape,
        layers,
        groups: net.groups.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        regularizer: ckpt.regularizer.clone(),
        config: ckpt.config.clone(),
        metrics: ckpt.metrics.clone(),
        report: ckpt.report.clone(),
        velocity_tensors: ckpt.velocity.as_ref().map(|v| v.len()),
        blobs: blobs.entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(dir, e))?;
    let write = |f: &mut fs::File| -> std::io::Result<()> {
        f.write_all(&[CHECKPOINT_VERSION])?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blobs.bytes)?;
        f.sync_all()
    };
    write(tmp.as_file_mut()).map_err(|e| DataError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

struct BlobReader<'a> {
    entries: std::slice::Iter<'a, BlobEntry>,
    bytes: &'a [u8],
    offset: usize,
}

impl BlobReader<'_> {
    fn next(&mut self, expected_name: &str) -> Result<Tensor, DataError> {
        let (shape, data) = self.next_raw(expected_name)?;
        Tensor::new(shape, data).map_err(|e| DataError::Format(format!("blob `{expected_name}`: {e}")))
    }

    fn next_raw(&mut self, expected_name: &str) -> Result<(Vec<usize>, Vec<f32>), DataError> {
        let entry = self
            .entries
            .next()
            .ok_or_else(|| DataError::Format(format!("checkpoint is missing blob `{expected_name}`")))?;
        if entry.name != expected_name {
            return Err(DataError::Format(format!("expected blob `{expected_name}`, found `{}`", entry.name)));
        }
        let len = entry.shape.iter().product::<usize>() * 4;
        let available = self.bytes.len() - self.offset;
        if len > available {
            return Err(DataError::Length { what: format!("blob `{}`", entry.name), expected: len, found: available });
        }
        let raw = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        if sha256_hex(raw) != entry.sha256 {
            return Err(DataError::Hash { blob: entry.name.clone() });
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        Ok((entry.shape.clone(), data))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Length { what: "checkpoint header".into(), expected: HEADER_LEN, found: bytes.len() });
    }
    if bytes[0] != CHECKPOINT_VERSION {
        return Err(DataError::Version { expected: CHECKPOINT_VERSION, found: bytes[0] });
    }
    let manifest_len = u64::from_le_bytes(bytes[1..HEADER_LEN].try_into().expect("eight bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if manifest_len > body.len() {
        return Err(DataError::Length { what: "checkpoint manifest".into(), expected: manifest_len, found: body.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])?;
    let blob_bytes = &body[manifest_len..];
    let expected: usize = manifest.blobs.iter().map(|b| b.shape.iter().product::<usize>() * 4).sum();
    if expected != blob_bytes.len() {
        return Err(DataError::Length { what: "checkpoint blobs".into(), expected, found: blob_bytes.len() });
    }
    let mut reader = BlobReader { entries: manifest.blobs.iter(), bytes: blob_bytes, offset: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.into_iter().enumerate() {
        let layer = match spec {
            LayerSpec::Conv2d { name, stride, padding } => {
                Layer::Conv2d { name, weight: reader.next(&format!("{i}.weight"))?, stride, padding }
            }
            LayerSpec::Linear { name } => Layer::Linear { name, weight: reader.next(&format!("{i}.weight"))? },
            LayerSpec::BatchNorm { name, momentum, epsilon } => Layer::BatchNorm {
                name,
                gamma: reader.next(&format!("{i}.gamma"))?,
                beta: reader.next(&format!("{i}.beta"))?,
                running_mean: reader.next_raw(&format!("{i}.running_mean"))?.1,
                running_var: reader.next_raw(&format!("{i}.running_var"))?.1,
                momentum,
                epsilon,
            },
            LayerSpec::Gate { name, gate_kind } => Layer::Gate {
                name,
                gate: GateLayer { kind: gate_kind, params: reader.next(&format!("{i}.gate"))? },
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d { kernel, stride },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Flatten { select } => Layer::Flatten { select },
            LayerSpec::Dropout { rate } => Layer::Dropout { rate },
        };
        layers.push(layer);
    }
    let velocity = match manifest.velocity_tensors {
        Some(n) => Some((0..n).map(|j| reader.next_raw(&format!("velocity.{j}")).map(|r| r.1)).collect::<Result<_, _>>()?),
        None => None,
    };
    if reader.entries.next().is_some() {
        return Err(DataError::Format("checkpoint has unreferenced blobs".into()));
    }
    let network = Network { arch: manifest.arch, input_shape: manifest.input_shape, layers, groups: manifest.groups };
    network.validate()?;
    Ok(Checkpoint {
        network,
        epoch: manifest.epoch,
        seed: manifest.seed,
        regularizer: manifest.regularizer,
        config: manifest.config,
        metrics: manifest.metrics,
        report: manifest.report,
        velocity,
    })
}
