//! Graph-regulated disentangled sparse selective-state-space classification
//! of multi-band image time series, trained and evaluated at desk scale.
//!
//! The crate is organized around a small reverse-mode tensor tape:
//!
//! - [`tensor`] — dense tensors, deterministic kernels, and the autodiff tape
//! - [`ssm`] — selective state-space scans and the gated block built on them
//! - [`graph`] — mini-batch RBF graphs and graph-convolution layers
//! - [`tokens`] — the spectral / temporal / spatial tokenizers
//! - [`sparse`] — token scoring, top-k masks and gather-process-scatter
//! - [`model`] — the full classifier, its ablations, checkpoints, complexity
//! - [`train`] — weighted cross-entropy, Adam, the training loop
//! - [`metrics`] — confusion-matrix metrics (overall/average accuracy, kappa)
//! - [`data`] — synthetic dataset generation and the on-disk container

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod sparse;
pub mod ssm;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
