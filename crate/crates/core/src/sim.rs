//! Trace-driven, chunk-level HTTP adaptive streaming simulator.
//!
//! Each step downloads one chunk by integrating the trace's bandwidth from
//! the current cursor, accounts rebuffering against the playback buffer,
//! sleeps when the buffer would exceed its cap, and scores the chunk with
//! the linear QoE model.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{AbrPolicy, ObservationBuilder, PolicyError};
use crate::rng_for;
use crate::trace::ResampledTrace;

pub const DEFAULT_LADDER_KBPS: [f64; 5] = [135.0, 340.0, 835.0, 1350.0, 2640.0];
pub const DEFAULT_CHUNK_SECONDS: f64 = 4.0;
pub const DEFAULT_TOTAL_CHUNKS: usize = 48;
pub const DEFAULT_JITTER: f64 = 0.1;
pub const MAX_JITTER: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("jitter {0} outside [0, {MAX_JITTER}]")]
    InvalidJitter(f64),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("chunk size must be positive, got {0}")]
    InvalidChunkSize(f64),
    #[error("trace {0} is empty")]
    EmptyTrace(String),
    #[error("bandwidth stayed at zero for more than {0} s")]
    ZeroBandwidthStall(f64),
    #[error("all {0} chunks have been sent")]
    EpisodeFinished(usize),
    #[error("action {action} outside ladder of {ladder}")]
    InvalidAction { action: usize, ladder: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Chunk sizes per bitrate for one synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub id: String,
    pub ladder_kbps: Vec<f64>,
    /// Seconds of playback per chunk.
    pub chunk_duration: f64,
    /// `chunk_sizes[c][r]`: bits of chunk `c` at rung `r`.
    pub chunk_sizes: Vec<Vec<f64>>,
}

impl VideoManifest {
    pub fn total_chunks(&self) -> usize {
        self.chunk_sizes.len()
    }

    pub fn ladder_len(&self) -> usize {
        self.ladder_kbps.len()
    }

    pub fn bitrate_mbps(&self, index: usize) -> f64 {
        self.ladder_kbps[index] / 1000.0
    }

    pub fn top_bitrate_mbps(&self) -> f64 {
        self.bitrate_mbps(self.ladder_len() - 1)
    }

    pub fn size(&self, chunk: usize, index: usize) -> f64 {
        self.chunk_sizes[chunk][index]
    }

    pub fn max_chunk_bits(&self) -> f64 {
        self.chunk_sizes
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidManifest(m));
        if self.ladder_kbps.is_empty() || self.chunk_sizes.is_empty() {
            return bad("empty ladder or no chunks".into());
        }
        if self.ladder_kbps.windows(2).any(|w| w[1] <= w[0]) || self.ladder_kbps[0] <= 0.0 {
            return bad("ladder must be positive and strictly increasing".into());
        }
        if !(self.chunk_duration > 0.0) {
            return bad("chunk duration must be positive".into());
        }
        for (c, row) in self.chunk_sizes.iter().enumerate() {
            if row.len() != self.ladder_len() {
                return bad(format!("chunk {c} has {} sizes", row.len()));
            }
            if row[0] <= 0.0 || row.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!("chunk {c} sizes not strictly increasing"));
            }
        }
        Ok(())
    }
}

/// `size(c, r) = ladder[r] · duration · (1 + u_c)` with one `u_c ~ U[-jitter, jitter]`
/// per chunk shared across the ladder.
pub fn generate_manifest(
    ladder_kbps: &[f64],
    chunk_duration: f64,
    total_chunks: usize,
    jitter: f64,
    seed: u64,
) -> Result<VideoManifest, SimError> {
    if !(0.0..=MAX_JITTER).contains(&jitter) {
        return Err(SimError::InvalidJitter(jitter));
    }
    if total_chunks == 0 {
        return Err(SimError::InvalidManifest("need at least one chunk".into()));
    }
    let mut rng = rng_for(seed, 0x5eed);
    let chunk_sizes = (0..total_chunks)
        .map(|_| {
            let u = if jitter > 0.0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0.0
            };
            ladder_kbps
                .iter()
                .map(|kbps| kbps * 1000.0 * chunk_duration * (1.0 + u))
                .collect()
        })
        .collect();
    let manifest = VideoManifest {
        id: format!("video-{seed}"),
        ladder_kbps: ladder_kbps.to_vec(),
        chunk_duration,
        chunk_sizes,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Weights of the per-chunk QoE score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeParams {
    /// Penalty per second of rebuffering.
    pub rebuffer_penalty: f64,
    /// Weight on |Δ bitrate| in Mbit/s.
    pub smoothness_penalty: f64,
}

impl Default for QoeParams {
    fn default() -> Self {
        Self {
            rebuffer_penalty: 2.64,
            smoothness_penalty: 1.0,
        }
    }
}

impl QoeParams {
    pub fn score(&self, utility: f64, rebuffer: f64, smoothness: f64) -> f64 {
        utility - self.rebuffer_penalty * rebuffer - self.smoothness_penalty * smoothness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Seconds.
    pub buffer_cap: f64,
    /// Fixed per-request latency, seconds.
    pub rtt: f64,
    /// Longest tolerated run of zero bandwidth, seconds.
    pub zero_stall_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            buffer_cap: 60.0,
            rtt: 0.08,
            zero_stall_limit: 120.0,
        }
    }
}

/// Player state between chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub clock: f64,
    pub buffer: f64,
    pub last_bitrate: Option<usize>,
    pub chunks_sent: usize,
    /// Position in the driving trace, seconds; wraps modulo the trace length.
    pub cursor: f64,
}

impl SimState {
    pub fn start(cursor: f64) -> Self {
        Self {
            clock: 0.0,
            buffer: 0.0,
            last_bitrate: None,
            chunks_sent: 0,
            cursor,
        }
    }
}

impl Default for SimState {
    fn default() -> Self {
        Self::start(0.0)
    }
}

/// Outcome of downloading one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkResult {
    pub chunk: usize,
    pub bitrate_index: usize,
    pub size_bits: f64,
    /// Seconds, including request latency.
    pub download_time: f64,
    pub rebuffer: f64,
    pub sleep: f64,
    pub buffer_after: f64,
    /// Size over download time, Mbit/s.
    pub throughput_mbps: f64,
    /// Bitrate of the chunk, Mbit/s.
    pub utility: f64,
    /// |Δ bitrate| against the previous chunk, Mbit/s; 0 for the first.
    pub smoothness: f64,
    pub qoe: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub config: SimConfig,
    pub qoe: QoeParams,
}

impl Simulator {
    pub fn new(config: SimConfig, qoe: QoeParams) -> Self {
        Self { config, qoe }
    }

    /// Download time for `size` bits starting at `cursor`, and the cursor
    /// after the download completes.
    pub fn download_chunk(&self, cursor: f64, trace: &ResampledTrace, size: f64) -> Result<(f64, f64), SimError> {
        if !(size > 0.0 && size.is_finite()) {
            return Err(SimError::InvalidChunkSize(size));
        }
        if trace.is_empty() {
            return Err(SimError::EmptyTrace(trace.id.clone()));
        }
        let len = trace.len();
        let mut t = cursor + self.config.rtt;
        let mut elapsed = self.config.rtt;
        let mut remaining = size;
        let mut zero_run = 0.0;
        loop {
            let second = t.floor();
            let bw = trace.values[(second as usize) % len] * 1e6;
            let left_in_second = second + 1.0 - t;
            if bw <= 0.0 {
                zero_run += left_in_second;
                if zero_run > self.config.zero_stall_limit {
                    return Err(SimError::ZeroBandwidthStall(self.config.zero_stall_limit));
                }
                t = second + 1.0;
                elapsed += left_in_second;
                continue;
            }
            zero_run = 0.0;
            let available = bw * left_in_second;
            if available >= remaining {
                let dt = remaining / bw;
                elapsed += dt;
                t += dt;
                return Ok((elapsed, t));
            }
            remaining -= available;
            elapsed += left_in_second;
            t = second + 1.0;
        }
    }

    pub fn step(
        &self,
        state: &SimState,
        manifest: &VideoManifest,
        trace: &ResampledTrace,
        action: usize,
    ) -> Result<(ChunkResult, SimState), SimError> {
        let total = manifest.total_chunks();
        if state.chunks_sent >= total {
            return Err(SimError::EpisodeFinished(total));
        }
        if action >= manifest.ladder_len() {
            return Err(SimError::InvalidAction {
                action,
                ladder: manifest.ladder_len(),
            });
        }
        let chunk = state.chunks_sent;
        let size = manifest.size(chunk, action);
        let (download_time, cursor) = self.download_chunk(state.cursor, trace, size)?;
        let rebuffer = (download_time - state.buffer).max(0.0);
        let mut buffer = (state.buffer - download_time).max(0.0) + manifest.chunk_duration;
        let sleep = (buffer - self.config.buffer_cap).max(0.0);
        buffer -= sleep;
        let utility = manifest.bitrate_mbps(action);
        let smoothness = state
            .last_bitrate
            .map_or(0.0, |last| (utility - manifest.bitrate_mbps(last)).abs());
        let result = ChunkResult {
            chunk,
            bitrate_index: action,
            size_bits: size,
            download_time,
            rebuffer,
            sleep,
            buffer_after: buffer,
            throughput_mbps: size / download_time / 1e6,
            utility,
            smoothness,
            qoe: self.qoe.score(utility, rebuffer, smoothness),
        };
        let next = SimState {
            clock: state.clock + download_time + sleep,
            buffer,
            last_bitrate: Some(action),
            chunks_sent: chunk + 1,
            cursor: cursor + sleep,
        };
        Ok((result, next))
    }

    /// Plays a whole video under `policy`, starting from `initial`.
    pub fn run_episode_from(
        &self,
        initial: SimState,
        manifest: &VideoManifest,
        trace: &ResampledTrace,
        policy: &mut dyn AbrPolicy,
    ) -> Result<Vec<ChunkResult>, SimError> {
        let mut state = initial;
        let mut builder = ObservationBuilder::new(manifest);
        let mut results = Vec::with_capacity(manifest.total_chunks());
        policy.reset();
        while state.chunks_sent < manifest.total_chunks() {
            let obs = builder.observe(&state);
            let action = policy.select(&obs)?;
            let (result, next) = self.step(&state, manifest, trace, action)?;
            builder.record(&result);
            policy.observe(&result)?;
            results.push(result);
            state = next;
        }
        Ok(results)
    }

    pub fn run_episode(
        &self,
        manifest: &VideoManifest,
        trace: &ResampledTrace,
        policy: &mut dyn AbrPolicy,
    ) -> Result<Vec<ChunkResult>, SimError> {
        self.run_episode_from(SimState::default(), manifest, trace, policy)
    }
}

/// Header record of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub policy: String,
    pub manifest_id: String,
    pub trace_id: String,
    pub qoe: QoeParams,
    pub chunks: usize,
}

/// One line of an episode log: the header first, then one record per chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum EpisodeRecord {
    Header(EpisodeHeader),
    Chunk(ChunkResult),
}

/// Renders an episode as JSON lines.
pub fn episode_log(header: &EpisodeHeader, results: &[ChunkResult]) -> String {
    let mut out = String::new();
    let mut push = |r: &EpisodeRecord| {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    };
    push(&EpisodeRecord::Header(header.clone()));
    for r in results {
        push(&EpisodeRecord::Chunk(*r));
    }
    out
}

pub fn parse_episode_log(text: &str) -> Result<(EpisodeHeader, Vec<ChunkResult>), serde_json::Error> {
    let mut header = None;
    let mut chunks = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line)? {
            EpisodeRecord::Header(h) => header = Some(h),
            EpisodeRecord::Chunk(c) => chunks.push(c),
        }
    }
    let header = header.ok_or_else(|| serde::de::Error::custom("episode log has no header"))?;
    Ok((header, chunks))
}
