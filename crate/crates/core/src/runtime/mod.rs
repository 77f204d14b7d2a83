//! Training harness and persistence: run configuration, checkpoint
//! container, the progressive training loop, and full-image restoration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod restore;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::{RunConfig, RunPaths, TrainPhase};
pub use data::PairSet;
pub use restore::{restore_image, RestoreOptions};
pub use train::{train, TrainOptions, TrainSummary};
