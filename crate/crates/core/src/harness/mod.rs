//! Data, training, evaluation and experiment drivers around the model.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod oracle;
pub mod selftest;
pub mod train;
