//! Training, evaluation, ablation and prediction.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod predict;
pub mod train;

pub use config::{DatasetSource, TrainConfig};
pub use train::{train, TrainSummary, Trainer};
