//! Tensorization of neural networks with slice-wise feature distillation.
//!
//! The crate compresses small sequential networks by replacing dense and
//! convolutional weights with tensor-network factorizations (matrix product
//! operators for dense layers, Tucker cores for convolutions) and then
//! "healing" each slice of the network independently: the tensorized slice is
//! trained to reproduce the recorded activations of its pretrained
//! counterpart, without touching the rest of the model.
//!
//! Module map:
//!
//! - [`tensor`]: dense row-major `f64` tensors with reshape / permute /
//!   contract / unfold and a binary on-disk format.
//! - [`svd`]: deterministic truncated SVD (one-sided Jacobi).
//! - [`decompose`]: MPO (tensor-train) and Tucker factorizations plus all
//!   compression-rate arithmetic.
//! - [`model`]: sequential networks, slicing, tensorization of slices, and
//!   model serialization.
//! - [`autodiff`]: reverse-mode differentiation over the op set used by the
//!   layers, plus the finite-difference oracle.
//! - [`optim`]: Adam and training configuration.
//! - [`data`]: built-in synthetic datasets and the toy baseline architectures.
//! - [`distill`]: feature capture, slice-wise distillation, global
//!   fine-tuning, and the hybrid schedule.
//! - [`profile`]: layer-sensitivity probing.
//! - [`schedule`]: deterministic worker pool for independent slice jobs.

pub mod autodiff;
pub mod data;
pub mod decompose;
pub mod error;
pub mod model;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod schedule;
pub mod svd;
pub mod tensor;

pub mod distill;

pub use error::{Error, Result};
pub use tensor::Tensor;
