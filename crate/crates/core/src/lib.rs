//! Multi-level contextual DAG-structured recurrent networks for scene labeling.

pub mod backbone;
pub mod context;
pub mod crnn;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
