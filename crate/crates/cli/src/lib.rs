//! Harness around the model: configuration, datasets, training, inference,
//! evaluation, checkpoints and feature dumps.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod eval;
pub mod infer;
pub mod metrics;
pub mod train;
