//! Training, evaluation, gradient checking and ablation drivers.

pub mod config;

pub use config::RunConfig;
pub mod ablate;
pub mod checkpoint;
pub mod grad_check;
pub mod train;

pub use train::{Trainer, TrainState};
