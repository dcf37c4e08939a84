//! Throughput-condition learning for adaptive bitrate streaming.
//!
//! The pipeline tiles throughput traces into fixed-length segments, clusters
//! them into network conditions, trains a multi-scale 1D CNN to recognise the
//! condition of the coming segment, and trains one actor-critic ABR policy per
//! condition. At playback time a confidence window gates which policy answers
//! each chunk request. A chunk-level simulator and an evaluation harness
//! compare the result against heuristic baselines.

pub mod abr;
pub mod cluster;
pub mod condition;
pub mod error;
pub mod eval;
pub mod par;
pub mod rl;
pub mod runtime;
pub mod sim;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a `(seed, stream)` pair.
///
/// Every random draw in the crate goes through this so that runs are
/// reproducible regardless of thread scheduling.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
