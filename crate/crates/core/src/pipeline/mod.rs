//! Datasets, synthetic tasks, metrics, prediction export and the command line.

pub mod cli;
pub mod compare;
pub mod dataset;
pub mod metrics;
pub mod predict;
pub mod synth;
