//! Spatial/frequency multi-level image restoration toolkit.
//!
//! The crate is built around a small dense-tensor engine with reverse-mode
//! differentiation and an exact-convention 2-D FFT (`tensor`), the network
//! building blocks assembled from it (`blocks`, `model`), multi-term training
//! objectives (`losses`), a synthetic under-display-camera degradation
//! generator (`degrade`), frequency-domain analysis and quality metrics
//! (`analyze`), and a training/restoration harness (`runtime`) surfaced
//! through the `sfim` binary (`cli`).
//!
//! Everything runs in 64-bit floats so analytic gradients can be validated
//! against central finite differences; determinism per seed is a contract,
//! not an accident (see `rng`).

pub mod analyze;
pub mod blocks;
pub mod check;
pub mod cli;
pub mod degrade;
pub mod error;
pub mod imgio;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod runtime;
pub mod tensor;

pub use error::{Result, SfimError};
pub use tensor::Tensor;
