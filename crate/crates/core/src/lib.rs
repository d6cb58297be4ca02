//! Channel gating, bounded-norm sparsity regularization and structured
//! pruning for small convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f32` tensors and a tape-based
//!   reverse-mode autodiff engine with the ops the networks need.
//! * [`norms`]: p-norm, 0-norm and the bounded-ℓp,0 norm.
//! * [`gating`]: exponential and linear (BN-scale) gates.
//! * [`regularization`]: gate penalties and σ/λ schedules.
//! * [`network`]: gated LeNet5-Caffe and a BN test network.
//! * [`prune`]: channel selection, compaction, gate merging and accounting.
//! * [`data_io`]: MNIST IDX loading, checkpoints and run configs.
//! * [`harness`]: training, fine-tuning, sweeps and reports.

pub mod autodiff;
pub mod data_io;
pub mod gating;
pub mod harness;
pub mod kernels;
pub mod network;
pub mod norms;
pub mod optim;
pub mod prune;
pub mod regularization;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use tensor::{Tensor, TensorError};
