//! Inference, attribution and evaluation engine for small layer-graph CNNs.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and numerical kernels
//! - [`netgraph`]: layer graphs, forward evaluation, model file formats
//! - [`autodiff`]: input gradients and a finite-difference oracle
//! - [`attribution`]: the eight explanation methods
//! - [`trainer`]: Adam training with early stopping and a synthetic lesion dataset
//! - [`evalkit`]: normalization, rendering, confusion matrices, localization
//!   and agreement metrics
//! - [`validate`]: self-checking oracle suites over seeded random networks

pub mod attribution;
pub mod autodiff;
pub mod evalkit;
pub mod netgraph;
pub mod tensor;
pub mod trainer;
pub mod validate;
