//! Bitrate-selection policies: the shared observation, the policy trait,
//! heuristic baselines, and the actor-critic network.

mod baselines;
mod model;
mod observation;

pub use baselines::{BufferBasedPolicy, FixedPolicy, RateBasedPolicy};
pub use model::{argmax, GreedyPolicy, PolicyArch, PolicyBatch, PolicyModel, PolicyNet};
pub use observation::{
    NormalizedObservation, Observation, ObservationBuilder, DOWNLOAD_SCALE_S, HISTORY, NORM_BOUND,
    THROUGHPUT_SCALE_MBPS,
};

use thiserror::Error;

use crate::sim::ChunkResult;
use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("bitrate index {index} outside ladder of {ladder}")]
    InvalidIndex { index: usize, ladder: usize },
    #[error("invalid policy architecture: {0}")]
    InvalidArch(String),
    #[error("observation shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("controller failure: {0}")]
    Controller(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Anything that picks a ladder index per chunk.
pub trait AbrPolicy {
    fn name(&self) -> String;

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError>;

    /// Sees the outcome of the chunk it just chose.
    fn observe(&mut self, _result: &ChunkResult) -> Result<(), PolicyError> {
        Ok(())
    }

    /// Called before each episode.
    fn reset(&mut self) {}
}
