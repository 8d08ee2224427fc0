//! Training, evaluation, metrics, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{SelectorMode, TrainConfig};
pub use train::{train, LossRecord, TrainOutcome};
