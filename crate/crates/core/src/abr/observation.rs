use serde::{Deserialize, Serialize};

use crate::sim::{ChunkResult, SimState, VideoManifest};

/// Length of the throughput and download-time histories.
pub const HISTORY: usize = 8;
pub const THROUGHPUT_SCALE_MBPS: f64 = 2.64;
pub const DOWNLOAD_SCALE_S: f64 = 10.0;
pub const BUFFER_SCALE_S: f64 = 60.0;
/// Every normalized component is clamped to `[-NORM_BOUND, NORM_BOUND]`.
pub const NORM_BOUND: f64 = 5.0;

/// What a policy sees before choosing the next chunk. Histories run oldest
/// to newest and are zero-padded at the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub throughput_mbps: [f64; HISTORY],
    pub download_time_s: [f64; HISTORY],
    /// Bits of the next chunk at every rung; zeros once the video is done.
    pub next_chunk_sizes: Vec<f64>,
    pub buffer_s: f64,
    pub last_bitrate_index: Option<usize>,
    pub chunks_remaining: usize,
    pub total_chunks: usize,
    pub ladder_kbps: Vec<f64>,
    pub max_chunk_bits: f64,
}

/// Network-ready form of an [`Observation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedObservation {
    pub throughput: [f64; HISTORY],
    pub download: [f64; HISTORY],
    pub sizes: Vec<f64>,
    pub buffer: f64,
    pub last_bitrate: f64,
    pub remaining: f64,
}

fn clamp(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-NORM_BOUND, NORM_BOUND)
    }
}

impl Observation {
    pub fn ladder_len(&self) -> usize {
        self.ladder_kbps.len()
    }

    /// Throughputs most recent first, skipping the zero padding.
    pub fn recent_throughputs(&self) -> impl Iterator<Item = f64> + '_ {
        self.throughput_mbps.iter().rev().copied().filter(|&t| t > 0.0)
    }

    pub fn normalize(&self) -> NormalizedObservation {
        let top = self.ladder_kbps.last().copied().unwrap_or(1.0);
        let size_scale = if self.max_chunk_bits > 0.0 { self.max_chunk_bits } else { 1.0 };
        NormalizedObservation {
            throughput: self.throughput_mbps.map(|t| clamp(t / THROUGHPUT_SCALE_MBPS)),
            download: self.download_time_s.map(|d| clamp(d / DOWNLOAD_SCALE_S)),
            sizes: self.next_chunk_sizes.iter().map(|s| clamp(s / size_scale)).collect(),
            buffer: clamp(self.buffer_s / BUFFER_SCALE_S),
            last_bitrate: self.last_bitrate_index.map_or(0.0, |i| clamp(self.ladder_kbps[i] / top)),
            remaining: clamp(self.chunks_remaining as f64 / self.total_chunks.max(1) as f64),
        }
    }
}

impl NormalizedObservation {
    /// Re-applies the bound; a no-op on anything produced by
    /// [`Observation::normalize`].
    pub fn normalize(&self) -> NormalizedObservation {
        NormalizedObservation {
            throughput: self.throughput.map(clamp),
            download: self.download.map(clamp),
            sizes: self.sizes.iter().map(|&s| clamp(s)).collect(),
            buffer: clamp(self.buffer),
            last_bitrate: clamp(self.last_bitrate),
            remaining: clamp(self.remaining),
        }
    }

    pub fn components(&self) -> impl Iterator<Item = f64> + '_ {
        self.throughput
            .iter()
            .chain(&self.download)
            .chain(&self.sizes)
            .copied()
            .chain([self.buffer, self.last_bitrate, self.remaining])
    }
}

/// Tracks the chunk history of one episode and renders observations.
#[derive(Debug, Clone)]
pub struct ObservationBuilder<'m> {
    manifest: &'m VideoManifest,
    max_chunk_bits: f64,
    throughput: [f64; HISTORY],
    download: [f64; HISTORY],
}

impl<'m> ObservationBuilder<'m> {
    pub fn new(manifest: &'m VideoManifest) -> Self {
        Self {
            manifest,
            max_chunk_bits: manifest.max_chunk_bits(),
            throughput: [0.0; HISTORY],
            download: [0.0; HISTORY],
        }
    }

    pub fn record(&mut self, result: &ChunkResult) {
        self.throughput.rotate_left(1);
        self.download.rotate_left(1);
        self.throughput[HISTORY - 1] = result.throughput_mbps;
        self.download[HISTORY - 1] = result.download_time;
    }

    pub fn observe(&self, state: &SimState) -> Observation {
        let total = self.manifest.total_chunks();
        let next_chunk_sizes = if state.chunks_sent < total {
            self.manifest.chunk_sizes[state.chunks_sent].clone()
        } else {
            vec![0.0; self.manifest.ladder_len()]
        };
        Observation {
            throughput_mbps: self.throughput,
            download_time_s: self.download,
            next_chunk_sizes,
            buffer_s: state.buffer,
            last_bitrate_index: state.last_bitrate,
            chunks_remaining: total.saturating_sub(state.chunks_sent),
            total_chunks: total,
            ladder_kbps: self.manifest.ladder_kbps.clone(),
            max_chunk_bits: self.max_chunk_bits,
        }
    }
}

#[cfg(test)]
pub(crate) fn blank_observation(ladder_kbps: &[f64]) -> Observation {
    Observation {
        throughput_mbps: [0.0; HISTORY],
        download_time_s: [0.0; HISTORY],
        next_chunk_sizes: ladder_kbps.iter().map(|k| k * 4000.0).collect(),
        buffer_s: 0.0,
        last_bitrate_index: None,
        chunks_remaining: 48,
        total_chunks: 48,
        ladder_kbps: ladder_kbps.to_vec(),
        max_chunk_bits: ladder_kbps.last().unwrap() * 4000.0,
    }
}
