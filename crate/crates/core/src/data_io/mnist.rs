use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::DataError;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
const CLASSES: u8 = 10;

/// Normalized images `[N, 1, H, W]` with labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::Format(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copies the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn check_len(what: &str, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Length {
            what: what.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `[N, 1, rows, cols]`, scaling pixels to
/// `[0, 1]` and then standardizing with the MNIST mean and deviation.
pub fn parse_idx_images(name: &str, bytes: &[u8]) -> Result<Tensor, DataError> {
    check_len(name, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(DataError::Magic { file: name.into(), expected: IMAGE_MAGIC, found: magic });
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    check_len(name, bytes, 16 + n * rows * cols)?;
    let data = bytes[16..16 + n * rows * cols]
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data).map_err(|e| DataError::Format(format!("{name}: {e}")))
}

pub fn parse_idx_labels(name: &str, bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    check_len(name, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(DataError::Magic { file: name.into(), expected: LABEL_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4) as usize;
    check_len(name, bytes, 8 + n)?;
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l < CLASSES {
                Ok(l as usize)
            } else {
                Err(DataError::Format(format!("{name}: label {l} at index {i} is not a digit")))
            }
        })
        .collect()
}

/// Reads `dir/name`, or `dir/name.gz` through a gzip decoder.
fn read_idx(dir: &Path, name: &str) -> Result<Vec<u8>, DataError> {
    let raw = dir.join(name);
    if raw.exists() {
        return fs::read(&raw).map_err(|e| DataError::io(raw, e));
    }
    let gz = dir.join(format!("{name}.gz"));
    let file = fs::File::open(&gz).map_err(|e| DataError::io(&gz, e))?;
    let mut out = Vec::new();
    GzDecoder::new(file).read_to_end(&mut out).map_err(|e| DataError::io(&gz, e))?;
    Ok(out)
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset, DataError> {
    let x = parse_idx_images(images, &read_idx(dir, images)?)?;
    let y = parse_idx_labels(labels, &read_idx(dir, labels)?)?;
    Dataset::new(x, y)
}

/// Loads the standard MNIST split from `dir` (raw or gzipped IDX files).
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}
