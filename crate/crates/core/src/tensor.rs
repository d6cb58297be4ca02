//! Dense row-major `f32` tensors.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by shape checks in tensor construction and the autodiff ops.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis} ({what}): expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        axis: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {found} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: kernel {kernel} with padding {padding} does not fit input extent {extent} at stride {stride}")]
    Window {
        op: &'static str,
        extent: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },
    #[error("label {label} at batch position {index} is outside the class range 0..{classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}

/// A dense tensor of 32-bit floats stored in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Keeps only the listed indices along `axis`, in the given order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::Rank {
                op: "select",
                expected: axis + 1,
                found: self.shape.clone(),
            });
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(TensorError::Invalid {
                op: "select",
                message: format!("index {bad} out of range for axis {axis} of extent {extent}"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::ZeroExtent({
                let mut s = self.shape.clone();
                s[axis] = 0;
                s
            }));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Multiplies every slice `k` along `axis` by `factors[k]`.
    pub fn scale_axis(&mut self, axis: usize, factors: &[f32]) -> Result<(), TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::Rank {
                op: "scale_axis",
                expected: axis + 1,
                found: self.shape.clone(),
            });
        }
        let extent = self.shape[axis];
        if factors.len() != extent {
            return Err(TensorError::DimensionMismatch {
                op: "scale_axis",
                axis,
                what: "factor count",
                expected: extent,
                found: factors.len(),
            });
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        for (chunk_idx, chunk) in self.data.chunks_mut(inner).enumerate() {
            let f = factors[chunk_idx % extent];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}
