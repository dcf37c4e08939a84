//! Throughput traces: loading, validation, synthesis, persistence and
//! resampling onto a 1 Hz grid.
//!
//! Trace files hold one `SECONDS BANDWIDTH_MBPS` pair per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng_for;

/// Synthetic traces never drop below this rate (Mbit/s).
pub const BANDWIDTH_FLOOR_MBPS: f64 = 0.01;

/// Shortest trace `synthesize_trace` will produce, in seconds.
pub const MIN_SYNTH_DURATION_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: expected two decimal numbers")]
    MalformedLine { line: usize },
    #[error("line {line}: timestamps must start at >= 0 and strictly increase")]
    NonMonotonicTime { line: usize },
    #[error("line {line}: bandwidth must be finite and non-negative")]
    NegativeBandwidth { line: usize },
    #[error("trace needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("trace {0} covers less than one second")]
    EmptyAfterResample(String),
    #[error("synthetic traces need at least {MIN_SYNTH_DURATION_S} s, asked for {0}")]
    DurationTooShort(f64),
    #[error("invalid archetype parameters: {0}")]
    InvalidArchetype(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_failure(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds.
    pub time: f64,
    /// Mbit/s.
    pub bandwidth: f64,
}

/// A validated, time-stamped bandwidth series.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputTrace {
    id: String,
    samples: Vec<Sample>,
}

impl ThroughputTrace {
    pub fn new(id: impl Into<String>, samples: Vec<Sample>) -> Result<Self, TraceError> {
        for (i, s) in samples.iter().enumerate() {
            validate_sample(i + 1, s, i.checked_sub(1).map(|p| samples[p].time))?;
        }
        if samples.len() < 2 {
            return Err(TraceError::TooFewSamples(samples.len()));
        }
        Ok(Self {
            id: id.into(),
            samples,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Covered duration: the last sample is held for the final inter-sample gap.
    pub fn duration(&self) -> f64 {
        let n = self.samples.len();
        let last_gap = self.samples[n - 1].time - self.samples[n - 2].time;
        self.samples[n - 1].time + last_gap - self.samples[0].time
    }
}

fn validate_sample(line: usize, s: &Sample, prev_time: Option<f64>) -> Result<(), TraceError> {
    if !s.time.is_finite() {
        return Err(TraceError::MalformedLine { line });
    }
    if !s.bandwidth.is_finite() || s.bandwidth < 0.0 {
        return Err(TraceError::NegativeBandwidth { line });
    }
    match prev_time {
        None if s.time < 0.0 => Err(TraceError::NonMonotonicTime { line }),
        Some(p) if s.time <= p => Err(TraceError::NonMonotonicTime { line }),
        _ => Ok(()),
    }
}

/// Parses trace text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_trace(id: impl Into<String>, text: &str) -> Result<ThroughputTrace, TraceError> {
    let mut samples: Vec<Sample> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split_whitespace();
        let parse = |f: Option<&str>| -> Result<f64, TraceError> {
            f.and_then(|v| v.parse::<f64>().ok())
                .ok_or(TraceError::MalformedLine { line })
        };
        let time = parse(fields.next())?;
        let bandwidth = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(TraceError::MalformedLine { line });
        }
        let sample = Sample { time, bandwidth };
        validate_sample(line, &sample, samples.last().map(|p| p.time))?;
        samples.push(sample);
    }
    ThroughputTrace::new(id, samples)
}

/// Loads a trace file; the trace id is the file stem.
pub fn load_trace(path: impl AsRef<Path>) -> Result<ThroughputTrace, TraceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_trace(id, &text)
}

/// Renders a trace with six fractional digits per field.
pub fn format_trace(trace: &ThroughputTrace) -> String {
    let mut out = String::with_capacity(trace.samples.len() * 20);
    for s in &trace.samples {
        let _ = writeln!(out, "{:.6} {:.6}", s.time, s.bandwidth);
    }
    out
}

pub fn save_trace(trace: &ThroughputTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    fs::write(path, format_trace(trace)).map_err(|e| io_failure(path, e))
}

/// Bandwidth on a uniform 1 s grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledTrace {
    pub id: String,
    /// Mbit/s, one value per second.
    pub values: Vec<f64>,
    pub origin: String,
}

impl ResampledTrace {
    /// Wraps an already uniform series. Used by tests and the runtime ring.
    pub fn from_values(id: impl Into<String>, values: Vec<f64>) -> Self {
        let id = id.into();
        Self {
            origin: id.clone(),
            id,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Time-weighted mean over each whole second, zero-order hold between
/// samples. A trailing partial second is dropped.
pub fn resample_1hz(trace: &ThroughputTrace) -> Result<ResampledTrace, TraceError> {
    let samples = trace.samples();
    let t0 = samples[0].time;
    let duration = trace.duration();
    let seconds = duration.floor() as usize;
    if seconds == 0 {
        return Err(TraceError::EmptyAfterResample(trace.id.clone()));
    }
    // Piece i holds samples[i].bandwidth on [start_i, end_i).
    let piece_end = |i: usize| -> f64 {
        if i + 1 < samples.len() {
            samples[i + 1].time - t0
        } else {
            duration
        }
    };
    let mut values = Vec::with_capacity(seconds);
    let mut piece = 0usize;
    for s in 0..seconds {
        let (lo, hi) = (s as f64, s as f64 + 1.0);
        let mut acc = 0.0;
        loop {
            let start = samples[piece].time - t0;
            let end = piece_end(piece);
            let overlap = end.min(hi) - start.max(lo);
            if overlap > 0.0 {
                acc += overlap * samples[piece].bandwidth;
            }
            if end <= hi && piece + 1 < samples.len() {
                piece += 1;
            } else {
                break;
            }
        }
        values.push(acc);
    }
    Ok(ResampledTrace {
        id: trace.id.clone(),
        values,
        origin: trace.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchetypeKind {
    StableHigh,
    StableLow,
    Ramp,
    Sawtooth,
    Bursty,
}

impl ArchetypeKind {
    pub const ALL: [ArchetypeKind; 5] = [
        ArchetypeKind::StableHigh,
        ArchetypeKind::StableLow,
        ArchetypeKind::Ramp,
        ArchetypeKind::Sawtooth,
        ArchetypeKind::Bursty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchetypeKind::StableHigh => "stable-high",
            ArchetypeKind::StableLow => "stable-low",
            ArchetypeKind::Ramp => "ramp",
            ArchetypeKind::Sawtooth => "sawtooth",
            ArchetypeKind::Bursty => "bursty",
        }
    }
}

/// Parameters of one synthetic trace family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceArchetype {
    pub kind: ArchetypeKind,
    /// Mbit/s.
    pub mean: f64,
    /// Mbit/s.
    pub amplitude: f64,
    /// Seconds.
    pub period: f64,
    /// Mbit/s.
    pub noise_std: f64,
    pub seed: u64,
}

impl TraceArchetype {
    /// The default five-family parameter set, one well-separated family per kind.
    pub fn preset(kind: ArchetypeKind, seed: u64) -> Self {
        let (mean, amplitude, period, noise_std) = match kind {
            ArchetypeKind::StableHigh => (4.5, 0.0, 20.0, 0.15),
            ArchetypeKind::StableLow => (0.6, 0.0, 20.0, 0.05),
            ArchetypeKind::Ramp => (2.8, 0.6, 20.0, 0.05),
            ArchetypeKind::Sawtooth => (1.6, 1.0, 20.0, 0.05),
            ArchetypeKind::Bursty => (2.0, 1.7, 8.0, 0.05),
        };
        Self {
            kind,
            mean,
            amplitude,
            period,
            noise_std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |msg: &str| Err(TraceError::InvalidArchetype(msg.to_string()));
        if !(self.mean > 0.0 && self.mean.is_finite()) {
            return bad("mean level must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise std must be non-negative");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be non-negative");
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return bad("period must be positive");
        }
        Ok(())
    }

    /// Noise-free level at time `t` for the deterministic families.
    fn shape(&self, t: f64) -> f64 {
        let phase = (t / self.period).rem_euclid(1.0);
        match self.kind {
            ArchetypeKind::StableHigh | ArchetypeKind::StableLow | ArchetypeKind::Bursty => {
                self.mean
            }
            ArchetypeKind::Ramp => self.mean + self.amplitude * (2.0 * phase - 1.0),
            ArchetypeKind::Sawtooth => self.mean + self.amplitude * (1.0 - 4.0 * (phase - 0.5).abs()),
        }
    }
}

/// Generates a 1 Hz trace of `duration` seconds from an archetype.
///
/// Pure in `(archetype, duration)`; the archetype carries its own seed.
pub fn synthesize_trace(
    id: impl Into<String>,
    archetype: &TraceArchetype,
    duration: f64,
) -> Result<ThroughputTrace, TraceError> {
    archetype.validate()?;
    if !(duration >= MIN_SYNTH_DURATION_S) {
        return Err(TraceError::DurationTooShort(duration));
    }
    let n = duration.floor() as usize;
    let mut rng = rng_for(archetype.seed, 0x7ace);
    let noise = Normal::new(0.0, archetype.noise_std)
        .map_err(|e| TraceError::InvalidArchetype(e.to_string()))?;
    let switch_prob = (2.0 / archetype.period).min(1.0);
    let mut high = rng.random_bool(0.5);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64;
        let base = if archetype.kind == ArchetypeKind::Bursty {
            if i > 0 && rng.random_bool(switch_prob) {
                high = !high;
            }
            if high {
                archetype.mean + archetype.amplitude
            } else {
                archetype.mean - archetype.amplitude
            }
        } else {
            archetype.shape(t)
        };
        let jitter = if archetype.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        samples.push(Sample {
            time: t,
            bandwidth: (base + jitter).max(BANDWIDTH_FLOOR_MBPS),
        });
    }
    ThroughputTrace::new(id, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One synthetic trace as recorded in the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub archetype: TraceArchetype,
    pub duration: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub traces: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn synthesize(&self, entry: &CorpusEntry) -> Result<ThroughputTrace, TraceError> {
        synthesize_trace(entry.id.clone(), &entry.archetype, entry.duration)
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.traces.iter().filter(move |e| e.split == split)
    }
}
