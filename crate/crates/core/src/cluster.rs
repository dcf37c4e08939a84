//! Segment tiling, K-means condition discovery and trace labelling.
//!
//! Segments are clustered on their raw per-second samples after per-dimension
//! z-standardisation. Centroids live in the standardised space; `sse` and
//! `dbi` report in raw Mbit/s space.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::rng_for;
use crate::trace::ResampledTrace;

/// Default segment length in seconds.
pub const DEFAULT_SEGMENT_SECONDS: usize = 20;
/// Default labelling threshold.
pub const DEFAULT_THRESHOLD: f64 = 2.0 / 3.0;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("trace {trace_id} has {len} samples, fewer than one {t}-second segment")]
    TraceTooShort { trace_id: String, len: usize, t: usize },
    #[error("segment length must be at least 2, got {0}")]
    InvalidSegmentLength(usize),
    #[error("need at least {k} segments, got {n}")]
    NotEnoughSegments { n: usize, k: usize },
    #[error("cluster count must be at least {min}, got {k}")]
    InvalidK { k: usize, min: usize },
    #[error("expected {expected}-dimensional input, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("centroids {0} and {1} coincide")]
    DegenerateSeparation(usize, usize),
    #[error("no segments to label")]
    NoSegments,
    #[error("unknown condition label {0:?}")]
    UnknownLabel(String),
}

/// A fixed-length, non-overlapping window of a resampled trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub trace_id: String,
    /// Offset in seconds from the trace start; a multiple of `values.len()`.
    pub start: usize,
    pub values: Vec<f64>,
}

/// Tiles a trace into `floor(len / t)` consecutive segments.
pub fn segment_trace(trace: &ResampledTrace, t: usize) -> Result<Vec<Segment>, ClusterError> {
    if t < 2 {
        return Err(ClusterError::InvalidSegmentLength(t));
    }
    if trace.values.len() < t {
        return Err(ClusterError::TraceTooShort {
            trace_id: trace.id.clone(),
            len: trace.values.len(),
            t,
        });
    }
    Ok(trace
        .values
        .chunks_exact(t)
        .enumerate()
        .map(|(i, chunk)| Segment {
            trace_id: trace.id.clone(),
            start: i * t,
            values: chunk.to_vec(),
        })
        .collect())
}

/// Network condition assigned to a segment, a trace, or the runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionLabel {
    Cluster(usize),
    Uncertain,
    General,
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionLabel::Cluster(i) => write!(f, "cluster-{i}"),
            ConditionLabel::Uncertain => f.write_str("uncertain"),
            ConditionLabel::General => f.write_str("general"),
        }
    }
}

impl FromStr for ConditionLabel {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uncertain" => Ok(ConditionLabel::Uncertain),
            "general" => Ok(ConditionLabel::General),
            other => other
                .strip_prefix("cluster-")
                .and_then(|i| i.parse().ok())
                .map(ConditionLabel::Cluster)
                .ok_or_else(|| ClusterError::UnknownLabel(other.to_string())),
        }
    }
}

impl Serialize for ConditionLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConditionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A feature vector that knows whether it has been standardised, so the
/// model's transform is idempotent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub standardized: bool,
}

impl FeatureVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            standardized: false,
        }
    }
}

/// Fitted K-means centroids plus the standardisation they were fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Standardised-space centroids, `k` vectors of the segment length.
    pub centroids: Vec<Vec<f64>>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Stable content identifier (FNV-1a over the JSON form).
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("cluster model serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("kmeans-k{}-{:016x}", self.k, h)
    }

    fn check_dim(&self, got: usize) -> Result<(), ClusterError> {
        if got != self.dim() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn standardize(&self, v: FeatureVector) -> Result<FeatureVector, ClusterError> {
        self.check_dim(v.values.len())?;
        if v.standardized {
            return Ok(v);
        }
        let values = v
            .values
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        Ok(FeatureVector {
            values,
            standardized: true,
        })
    }

    /// Centroids mapped back to raw units.
    pub fn raw_centroids(&self) -> Vec<Vec<f64>> {
        self.centroids
            .iter()
            .map(|c| {
                c.iter()
                    .zip(self.feature_mean.iter().zip(&self.feature_std))
                    .map(|(z, (m, s))| z * s + m)
                    .collect()
            })
            .collect()
    }

    /// Nearest centroid in standardised space; ties go to the lower index.
    pub fn assign(&self, v: FeatureVector) -> Result<usize, ClusterError> {
        let z = self.standardize(v)?;
        Ok(nearest(&self.centroids, &z.values).0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            seed,
        }
    }
}

/// Full output of a K-means fit.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Standardised-space objective of the kept restart.
    pub inertia: f64,
    /// Objective after every assignment step of the kept restart.
    pub sse_history: Vec<f64>,
    /// Per-restart histories, kept for monotonicity checks.
    pub restart_histories: Vec<Vec<f64>>,
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            weighted_pick(&d2, rng.random::<f64>() * total)
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Index whose cumulative weight first exceeds `target`, skipping zero weights.
fn weighted_pick(weights: &[f64], mut target: f64) -> usize {
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 && target < *w {
            return i;
        }
        target -= w;
    }
    // Rounding can run past the end; fall back to the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut impl Rng) -> Run {
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (next, dists): (Vec<usize>, Vec<f64>) =
            points.iter().map(|p| nearest(&centroids, p)).unzip();
        history.push(dists.iter().sum());
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut dist_to_own = dists;
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let (far, _) = dist_to_own
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &d)| {
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    });
                centroids[c] = points[far].clone();
                dist_to_own[far] = 0.0;
            }
        }
    }
    hartigan_refine(points, k, &mut centroids, &mut assignments, &mut history);
    let inertia = *history.last().expect("at least one iteration");
    Run {
        centroids,
        assignments,
        inertia,
        history,
    }
}

/// Single-point transfers after Lloyd has converged: a point moves from
/// cluster `a` to `b` whenever `n_b/(n_b+1)·d(x,c_b) < n_a/(n_a-1)·d(x,c_a)`,
/// which strictly lowers the objective. Every fixed point of this pass is
/// also a Lloyd fixed point, and many Lloyd local minima are not fixed
/// points of it. Appends the objective after each pass that moved a point.
fn hartigan_refine(
    points: &[Vec<f64>],
    k: usize,
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    history: &mut Vec<f64>,
) {
    let dim = points[0].len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let refresh = |c: usize, centroids: &mut [Vec<f64>], sums: &[Vec<f64>], counts: &[usize]| {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    };
    for c in 0..k {
        refresh(c, centroids, &sums, &counts);
    }
    loop {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let leave = counts[a] as f64 / (counts[a] - 1) as f64 * sq_dist(p, &centroids[a]);
            let mut best = (a, leave);
            for b in (0..k).filter(|&b| b != a) {
                let join = counts[b] as f64 / (counts[b] + 1) as f64 * sq_dist(p, &centroids[b]);
                if join < best.1 - 1e-12 * (1.0 + leave) {
                    best = (b, join);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            counts[a] -= 1;
            counts[b] += 1;
            for d in 0..dim {
                sums[a][d] -= p[d];
                sums[b][d] += p[d];
            }
            assignments[i] = b;
            refresh(a, centroids, &sums, &counts);
            refresh(b, centroids, &sums, &counts);
            moved = true;
        }
        if !moved {
            break;
        }
        history.push(
            points
                .iter()
                .zip(assignments.iter())
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .sum(),
        );
    }
}

/// Per-dimension mean and population std; zero-variance dimensions get std 1.
pub fn standardization(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for p in points {
        for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// K-means on arbitrary equal-length vectors. `k == 1` is accepted here.
pub fn fit_points(points: &[Vec<f64>], config: KMeansConfig) -> Result<KMeansFit, ClusterError> {
    if config.k == 0 {
        return Err(ClusterError::InvalidK { k: 0, min: 1 });
    }
    if points.len() < config.k || points.is_empty() {
        return Err(ClusterError::NotEnoughSegments {
            n: points.len(),
            k: config.k,
        });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let (feature_mean, feature_std) = standardization(points);
    let z: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(feature_mean.iter().zip(&feature_std))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();
    let runs = par::map_range(config.restarts.max(1), |r| {
        let mut rng = rng_for(config.seed, r as u64);
        lloyd(&z, config.k, config.max_iter, &mut rng)
    });
    let restart_histories = runs.iter().map(|r| r.history.clone()).collect();
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart");
    Ok(KMeansFit {
        model: ClusterModel {
            k: config.k,
            centroids: best.centroids,
            feature_mean,
            feature_std,
            seed: config.seed,
        },
        assignments: best.assignments,
        inertia: best.inertia,
        sse_history: best.history,
        restart_histories,
    })
}

/// Fits `k >= 2` conditions to segments with the default restart policy.
pub fn fit_kmeans(segments: &[Segment], k: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    fit_kmeans_detailed(segments, KMeansConfig::new(k, seed)).map(|f| f.model)
}

pub fn fit_kmeans_detailed(
    segments: &[Segment],
    config: KMeansConfig,
) -> Result<KMeansFit, ClusterError> {
    if config.k < 2 {
        return Err(ClusterError::InvalidK { k: config.k, min: 2 });
    }
    let points: Vec<Vec<f64>> = segments.iter().map(|s| s.values.clone()).collect();
    fit_points(&points, config)
}

fn raw_assign(model: &ClusterModel, points: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<(usize, f64)>), ClusterError> {
    for p in points {
        model.check_dim(p.len())?;
    }
    let raw = model.raw_centroids();
    let nearest = points.iter().map(|p| nearest(&raw, p)).collect();
    Ok((raw, nearest))
}

/// Raw-space squared error to the nearest centroid, summed over points.
pub fn sse_points(model: &ClusterModel, points: &[&[f64]]) -> Result<f64, ClusterError> {
    let (_, nearest) = raw_assign(model, points)?;
    Ok(nearest.iter().map(|(_, d)| d).sum())
}

pub fn sse(model: &ClusterModel, segments: &[Segment]) -> Result<f64, ClusterError> {
    let points: Vec<&[f64]> = segments.iter().map(|s| s.values.as_slice()).collect();
    sse_points(model, &points)
}

/// Raw-space Davies-Bouldin index.
pub fn dbi_points(model: &ClusterModel, points: &[&[f64]]) -> Result<f64, ClusterError> {
    if model.k < 2 {
        return Err(ClusterError::InvalidK { k: model.k, min: 2 });
    }
    let (raw, nearest) = raw_assign(model, points)?;
    for i in 0..model.k {
        for j in i + 1..model.k {
            if sq_dist(&raw[i], &raw[j]) == 0.0 {
                return Err(ClusterError::DegenerateSeparation(i, j));
            }
        }
    }
    let mut scatter = vec![0.0; model.k];
    let mut counts = vec![0usize; model.k];
    for &(c, d2) in &nearest {
        scatter[c] += d2.sqrt();
        counts[c] += 1;
    }
    for c in 0..model.k {
        if counts[c] == 0 {
            return Err(ClusterError::EmptyCluster(c));
        }
        scatter[c] /= counts[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..model.k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..model.k {
            if i == j {
                continue;
            }
            let m = sq_dist(&raw[i], &raw[j]).sqrt();
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / model.k as f64)
}

pub fn dbi(model: &ClusterModel, segments: &[Segment]) -> Result<f64, ClusterError> {
    let points: Vec<&[f64]> = segments.iter().map(|s| s.values.as_slice()).collect();
    dbi_points(model, &points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepEntry {
    pub k: usize,
    pub sse: f64,
    pub dbi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepReport {
    pub seed: u64,
    pub entries: Vec<KSweepEntry>,
}

/// One fit per `k` with a shared seed; SSE and DBI are both raw-space.
pub fn sweep_k(
    segments: &[Segment],
    ks: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<KSweepReport, ClusterError> {
    let ks: Vec<usize> = ks.collect();
    let entries = par::try_map_range(ks.len(), |i| {
        let k = ks[i];
        let model = fit_kmeans(segments, k, seed)?;
        Ok(KSweepEntry {
            k,
            sse: sse(&model, segments)?,
            dbi: dbi(&model, segments)?,
        })
    })?;
    Ok(KSweepReport { seed, entries })
}

pub fn label_segment(model: &ClusterModel, segment: &Segment) -> Result<ConditionLabel, ClusterError> {
    model
        .assign(FeatureVector::raw(segment.values.clone()))
        .map(ConditionLabel::Cluster)
}

/// Majority label if its share reaches `h`; otherwise (or on a tie for the
/// top share) `Uncertain`.
pub fn label_from_segment_labels(labels: &[ConditionLabel], h: f64) -> Result<ConditionLabel, ClusterError> {
    if labels.is_empty() {
        return Err(ClusterError::NoSegments);
    }
    let mut counts: BTreeMap<ConditionLabel, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    let top = *counts.values().max().expect("non-empty");
    let mut leaders = counts.iter().filter(|(_, c)| **c == top);
    let (label, _) = leaders.next().expect("non-empty");
    if leaders.next().is_some() {
        return Ok(ConditionLabel::Uncertain);
    }
    let freq = top as f64 / labels.len() as f64;
    Ok(if freq >= h { *label } else { ConditionLabel::Uncertain })
}

pub fn label_trace(model: &ClusterModel, segments: &[Segment], h: f64) -> Result<ConditionLabel, ClusterError> {
    let labels = segments
        .iter()
        .map(|s| label_segment(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    label_from_segment_labels(&labels, h)
}

/// One row of the labelled-segment export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabelRecord {
    pub trace_id: String,
    pub segment_start: usize,
    pub label: ConditionLabel,
}
