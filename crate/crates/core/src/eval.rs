//! End-to-end experiment pipeline and QoE statistics.
//!
//! Stages communicate only through files under one output directory, so
//! each can be rerun on its own:
//!
//! | stage              | writes                                               |
//! |--------------------|------------------------------------------------------|
//! | `corpus`           | `corpus/manifest.json`, `corpus/traces/*.txt`        |
//! | `cluster`          | `cluster/{sweep,model,trace_labels}.json`, `cluster/segments.jsonl` |
//! | `train-classifier` | `classifier/classifier.{json,bin}`, `classifier/report.json` |
//! | `train-zoo`        | `zoo/index.json`, one checkpoint per model, `zoo/training_log.jsonl` |
//! | `evaluate`         | `eval/episodes/<policy>/<trace>.jsonl`, `eval/runtime/<trace>.jsonl` |
//! | `report`           | `report/summary.{json,csv}`, `report/cdf/*.csv`      |
//!
//! Every stage also writes `<stage>/stage.json` with the configuration it ran under.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{AbrPolicy, BufferBasedPolicy, FixedPolicy, GreedyPolicy, PolicyArch, RateBasedPolicy};
use crate::cluster::{
    fit_kmeans, label_from_segment_labels, label_segment, segment_trace, sweep_k, ClusterModel, ConditionLabel,
    KSweepReport, Segment, SegmentLabelRecord, DEFAULT_THRESHOLD,
};
use crate::condition::{build_dataset_strided, train_classifier, ConditionClassifier, ConditionNetConfig, TrainReport};
use crate::rl::{train_zoo, training_log_jsonl, ModelZoo, TrainConfig, TrainOutcome};
use crate::runtime::{runtime_log_jsonl, AntPolicy, RuntimeConfig};
use crate::sim::{
    episode_log, generate_manifest, parse_episode_log, ChunkResult, EpisodeHeader, QoeParams, SimConfig, Simulator,
    VideoManifest, DEFAULT_CHUNK_SECONDS, DEFAULT_JITTER, DEFAULT_LADDER_KBPS, DEFAULT_TOTAL_CHUNKS,
};
use crate::trace::{
    load_trace, resample_1hz, save_trace, ArchetypeKind, CorpusEntry, CorpusManifest, ResampledTrace, Split,
    TraceArchetype,
};
use crate::{par, rng_for, Error, Result};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("missing artifact from stage {stage}: {path}")]
    MissingArtifact { stage: String, path: String },
    #[error("invalid experiment config: {0}")]
    ConfigInvalid(String),
    #[error("no values to summarise")]
    EmptyInput,
    #[error("need at least 2 chunks, got {0}")]
    TooFewChunks(usize),
}

/// Synthetic corpus layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub traces_per_archetype: usize,
    /// Seconds per trace.
    pub duration: f64,
    pub train_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            traces_per_archetype: 24,
            duration: 240.0,
            train_fraction: 0.8,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub ladder_kbps: Vec<f64>,
    pub chunk_seconds: f64,
    pub chunks: usize,
    pub jitter: f64,
    /// Distinct manifests drawn from during training.
    pub training_manifests: usize,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            ladder_kbps: DEFAULT_LADDER_KBPS.to_vec(),
            chunk_seconds: DEFAULT_CHUNK_SECONDS,
            chunks: DEFAULT_TOTAL_CHUNKS,
            jitter: DEFAULT_JITTER,
            training_manifests: 4,
        }
    }
}

/// A policy to compare in the evaluation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    Ant,
    GeneralOnly,
    RateBased,
    BufferBased,
    Fixed { index: usize },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Ant => "ant".into(),
            PolicySpec::GeneralOnly => "general-only".into(),
            PolicySpec::RateBased => "rate-based".into(),
            PolicySpec::BufferBased => "buffer-based".into(),
            PolicySpec::Fixed { index } => format!("fixed-{index}"),
        }
    }

    /// ANT, General-only, both heuristics and every fixed rung.
    pub fn standard_set(ladder_len: usize) -> Vec<PolicySpec> {
        let mut out = vec![
            PolicySpec::Ant,
            PolicySpec::GeneralOnly,
            PolicySpec::RateBased,
            PolicySpec::BufferBased,
        ];
        out.extend((0..ladder_len).map(|index| PolicySpec::Fixed { index }));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub k: usize,
    pub sweep_min_k: usize,
    pub sweep_max_k: usize,
    pub segment_seconds: usize,
    pub threshold: f64,
    pub classifier: ConditionNetConfig,
    pub rl: TrainConfig,
    pub video: VideoSpec,
    pub sim: SimConfig,
    pub qoe: QoeParams,
    pub runtime: RuntimeConfig,
    pub policies: Vec<PolicySpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let k = 5;
        Self {
            seed: 1,
            corpus: CorpusSpec::default(),
            k,
            sweep_min_k: 2,
            sweep_max_k: 8,
            segment_seconds: 20,
            threshold: DEFAULT_THRESHOLD,
            classifier: ConditionNetConfig::new(k, 1),
            rl: TrainConfig::default(),
            video: VideoSpec::default(),
            sim: SimConfig::default(),
            qoe: QoeParams::default(),
            runtime: RuntimeConfig::default(),
            policies: PolicySpec::standard_set(DEFAULT_LADDER_KBPS.len()),
        }
    }
}

impl ExperimentConfig {
    /// Narrow networks and short training that finish in minutes on one core.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            classifier: ConditionNetConfig {
                stage_channels: vec![12, 24, 48],
                fc: vec![64, 32],
                batch_size: 80,
                learning_rate: 2e-3,
                max_epochs: 40,
                patience: Some(10),
                target_accuracy: None,
                dataset_stride: Some(4),
                dropout: 0.2,
                ..base.classifier.clone()
            },
            rl: TrainConfig {
                actor_lr: 1e-3,
                critic_lr: 1e-2,
                entropy_weight: 0.5,
                entropy_final: Some(0.02),
                workers: 1,
                episodes: 12_000,
                eval_every: 200,
                warm_start_chunks: 24,
                arch: PolicyArch {
                    channels: 16,
                    hidden: 32,
                    ..PolicyArch::default()
                },
                ..base.rl
            },
            ..base
        }
    }

    /// Applies a new top-level seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.classifier.seed = seed;
        self.rl.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::ConfigInvalid(m));
        let c = &self.corpus;
        if (c.train_fraction + c.test_fraction - 1.0).abs() > 1e-9 || c.train_fraction <= 0.0 || c.test_fraction <= 0.0 {
            return bad(format!("split {} / {} must be positive and sum to 1", c.train_fraction, c.test_fraction));
        }
        if c.traces_per_archetype == 0 {
            return bad("empty corpus".into());
        }
        if self.k < 2 || self.sweep_min_k < 2 || self.sweep_min_k > self.sweep_max_k {
            return bad(format!("k {} with sweep {}..={}", self.k, self.sweep_min_k, self.sweep_max_k));
        }
        if self.classifier.classes != self.k {
            return bad(format!("classifier has {} classes for k = {}", self.classifier.classes, self.k));
        }
        if self.classifier.input_len != self.segment_seconds {
            return bad("classifier input length must equal the segment length".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold {}", self.threshold));
        }
        if self.runtime.segment_seconds != self.segment_seconds {
            return bad("runtime and dataset segment lengths differ".into());
        }
        if self.video.training_manifests == 0 {
            return bad("need at least one training manifest".into());
        }
        if self.rl.arch.actions != self.video.ladder_kbps.len() {
            return bad("policy action count must match the ladder".into());
        }
        if self.qoe.rebuffer_penalty < 0.0 || self.qoe.smoothness_penalty < 0.0 {
            return bad("QoE penalties must be non-negative".into());
        }
        if self.policies.is_empty() {
            return bad("no policies to evaluate".into());
        }
        self.classifier.validate().map_err(|e| EvalError::ConfigInvalid(e.to_string()))?;
        self.rl.validate().map_err(|e| EvalError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.sim, self.qoe)
    }

    fn manifest(&self, seed: u64) -> Result<VideoManifest> {
        let v = &self.video;
        Ok(generate_manifest(&v.ladder_kbps, v.chunk_seconds, v.chunks, v.jitter, seed)?)
    }

    pub fn training_manifests(&self) -> Result<Vec<VideoManifest>> {
        (0..self.video.training_manifests as u64)
            .map(|i| self.manifest(self.seed.wrapping_mul(1000).wrapping_add(i)))
            .collect()
    }

    /// The manifest played against the `i`-th test trace.
    pub fn evaluation_manifest(&self, i: usize) -> Result<VideoManifest> {
        self.manifest(self.seed.wrapping_mul(1000).wrapping_add(500 + i as u64))
    }
}

/// Stage names in pipeline order.
pub const STAGES: [&str; 6] = ["corpus", "cluster", "train-classifier", "train-zoo", "evaluate", "report"];

#[derive(Serialize)]
struct StageRecord<'a> {
    stage: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(EvalError::MissingArtifact {
            stage: stage.to_string(),
            path: path.display().to_string(),
        }
        .into())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    require(path, stage)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn record_stage(out: &Path, dir: &str, stage: &str, cfg: &ExperimentConfig) -> Result<()> {
    write_json(
        &out.join(dir).join("stage.json"),
        &StageRecord {
            stage,
            seed: cfg.seed,
            config: cfg,
        },
    )
}

/// Builds the corpus manifest: `traces_per_archetype` preset traces per
/// family with derived seeds, split at whole-trace granularity.
pub fn corpus_manifest(cfg: &ExperimentConfig) -> CorpusManifest {
    let n = cfg.corpus.traces_per_archetype;
    let mut entries = Vec::with_capacity(n * ArchetypeKind::ALL.len());
    for (ki, kind) in ArchetypeKind::ALL.iter().enumerate() {
        for j in 0..n {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((ki * 10_000 + j) as u64);
            entries.push(CorpusEntry {
                id: format!("{}-{j:03}", kind.name()),
                archetype: TraceArchetype::preset(*kind, seed),
                duration: cfg.corpus.duration,
                split: Split::Train,
            });
        }
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, 0x5b17));
    let test = ((entries.len() as f64) * cfg.corpus.test_fraction).round() as usize;
    for &i in &order[..test.min(entries.len())] {
        entries[i].split = Split::Test;
    }
    CorpusManifest {
        seed: cfg.seed,
        train_fraction: cfg.corpus.train_fraction,
        traces: entries,
    }
}

pub fn cmd_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let manifest = corpus_manifest(cfg);
    for entry in &manifest.traces {
        let trace = manifest.synthesize(entry)?;
        let path = out.join("corpus/traces").join(format!("{}.txt", entry.id));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_trace(&trace, &path)?;
    }
    write_json(&out.join("corpus/manifest.json"), &manifest)?;
    record_stage(out, "corpus", "corpus", cfg)?;
    Ok(manifest)
}

/// Loads and resamples every corpus trace of `split`, in manifest order.
pub fn load_split(out: &Path, split: Split) -> Result<Vec<ResampledTrace>> {
    let manifest: CorpusManifest = read_json(&out.join("corpus/manifest.json"), "corpus")?;
    manifest
        .ids(split)
        .map(|e| {
            let path = out.join("corpus/traces").join(format!("{}.txt", e.id));
            require(&path, "corpus")?;
            Ok(resample_1hz(&load_trace(&path)?)?)
        })
        .collect()
}

/// Trace-level label of every training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLabel {
    pub trace_id: String,
    pub label: ConditionLabel,
}

#[derive(Debug)]
pub struct ClusterArtifacts {
    pub sweep: KSweepReport,
    pub model: ClusterModel,
    pub trace_labels: Vec<TraceLabel>,
}

pub fn cmd_cluster(cfg: &ExperimentConfig, out: &Path) -> Result<ClusterArtifacts> {
    cfg.validate()?;
    let traces = load_split(out, Split::Train)?;
    let per_trace: Vec<Vec<Segment>> = traces
        .iter()
        .map(|t| segment_trace(t, cfg.segment_seconds))
        .collect::<Result<_, _>>()?;
    let segments: Vec<Segment> = per_trace.iter().flatten().cloned().collect();
    let sweep = sweep_k(&segments, cfg.sweep_min_k..=cfg.sweep_max_k, cfg.seed)?;
    let model = fit_kmeans(&segments, cfg.k, cfg.seed)?;
    let mut records = String::new();
    let mut trace_labels = Vec::with_capacity(traces.len());
    for (trace, segs) in traces.iter().zip(&per_trace) {
        let labels = segs.iter().map(|s| label_segment(&model, s)).collect::<Result<Vec<_>, _>>()?;
        for (s, &label) in segs.iter().zip(&labels) {
            let rec = SegmentLabelRecord {
                trace_id: s.trace_id.clone(),
                segment_start: s.start,
                label,
            };
            records.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            records.push('\n');
        }
        trace_labels.push(TraceLabel {
            trace_id: trace.id.clone(),
            label: label_from_segment_labels(&labels, cfg.threshold)?,
        });
    }
    write_json(&out.join("cluster/sweep.json"), &sweep)?;
    write_json(&out.join("cluster/model.json"), &model)?;
    write_json(&out.join("cluster/trace_labels.json"), &trace_labels)?;
    write_text(&out.join("cluster/segments.jsonl"), &records)?;
    record_stage(out, "cluster", "cluster", cfg)?;
    Ok(ClusterArtifacts {
        sweep,
        model,
        trace_labels,
    })
}

pub fn load_cluster_model(out: &Path) -> Result<ClusterModel> {
    read_json(&out.join("cluster/model.json"), "cluster")
}

pub fn cmd_train_classifier(cfg: &ExperimentConfig, out: &Path) -> Result<(ConditionClassifier, TrainReport)> {
    cfg.validate()?;
    let model = load_cluster_model(out)?;
    let traces = load_split(out, Split::Train)?;
    let dataset = build_dataset_strided(
        &model,
        &traces,
        cfg.classifier.target,
        cfg.threshold,
        cfg.classifier.dataset_stride,
    )?;
    let (clf, report) = train_classifier(&cfg.classifier, &dataset, &model.id())?;
    let dir = out.join("classifier");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    clf.save(&dir, "classifier")?;
    write_json(&dir.join("report.json"), &report)?;
    record_stage(out, "classifier", "train-classifier", cfg)?;
    Ok((clf, report))
}

pub fn load_classifier(out: &Path) -> Result<ConditionClassifier> {
    let path = out.join("classifier/classifier.json");
    require(&path, "train-classifier")?;
    ConditionClassifier::load(path)
}

pub fn cmd_train_zoo(cfg: &ExperimentConfig, out: &Path) -> Result<(ModelZoo, Vec<TrainOutcome>)> {
    cfg.validate()?;
    let traces = load_split(out, Split::Train)?;
    let labels: Vec<TraceLabel> = read_json(&out.join("cluster/trace_labels.json"), "cluster")?;
    let labeled: Vec<(ResampledTrace, ConditionLabel)> = traces
        .into_iter()
        .map(|t| {
            let label = labels
                .iter()
                .find(|l| l.trace_id == t.id)
                .map(|l| l.label)
                .ok_or_else(|| EvalError::MissingArtifact {
                    stage: "cluster".into(),
                    path: format!("label for {}", t.id),
                })?;
            Ok((t, label))
        })
        .collect::<Result<_>>()?;
    let manifests = cfg.training_manifests()?;
    let (zoo, outcomes) = train_zoo(&cfg.rl, cfg.k, &labeled, &manifests, &cfg.simulator())?;
    let dir = out.join("zoo");
    zoo.save(&dir)?;
    let log: Vec<_> = outcomes.iter().flat_map(|o| o.log.iter().cloned()).collect();
    write_text(&dir.join("training_log.jsonl"), &training_log_jsonl(&log))?;
    let summary: Vec<_> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "model": o.log.first().map(|e| e.model.clone()).unwrap_or_default(),
                "best_round": o.best_round,
                "best_validation_qoe": o.best_validation_qoe,
            })
        })
        .collect();
    write_json(&dir.join("outcomes.json"), &summary)?;
    record_stage(out, "zoo", "train-zoo", cfg)?;
    Ok((zoo, outcomes))
}

pub fn load_zoo(out: &Path) -> Result<ModelZoo> {
    require(&out.join("zoo/index.json"), "train-zoo")?;
    ModelZoo::load(out.join("zoo"))
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub policy: String,
    pub trace_id: String,
    pub chunks: Vec<ChunkResult>,
}

fn episode_dir(out: &Path, policy: &str) -> PathBuf {
    out.join("eval/episodes").join(policy)
}

/// Plays every configured policy on every test trace and writes the logs.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let traces = load_split(out, Split::Test)?;
    let needs_zoo = cfg.policies.iter().any(|p| matches!(p, PolicySpec::Ant | PolicySpec::GeneralOnly));
    let zoo = if needs_zoo { Some(load_zoo(out)?) } else { None };
    let classifier = if cfg.policies.contains(&PolicySpec::Ant) {
        Some(load_classifier(out)?)
    } else {
        None
    };
    let manifests: Vec<VideoManifest> = (0..traces.len()).map(|i| cfg.evaluation_manifest(i)).collect::<Result<_>>()?;
    let sim = cfg.simulator();
    let jobs: Vec<(PolicySpec, usize)> = cfg
        .policies
        .iter()
        .flat_map(|&p| (0..traces.len()).map(move |t| (p, t)))
        .collect();
    let results = par::try_map_range(jobs.len(), |j| -> Result<(Episode, Option<String>)> {
        let (spec, ti) = jobs[j];
        let trace = &traces[ti];
        let manifest = &manifests[ti];
        let ladder = manifest.ladder_len();
        let (chunks, runtime_log) = match spec {
            PolicySpec::Ant => {
                let zoo = zoo.as_ref().expect("zoo loaded");
                let clf = classifier.as_ref().expect("classifier loaded");
                let mut policy = AntPolicy::new(zoo, clf, cfg.runtime)?;
                let chunks = sim.run_episode(manifest, trace, &mut policy)?;
                (chunks, Some(runtime_log_jsonl(policy.events())))
            }
            PolicySpec::GeneralOnly => {
                let zoo = zoo.as_ref().expect("zoo loaded");
                let mut policy = GreedyPolicy {
                    model: zoo.general(),
                    label: "general-only",
                };
                (sim.run_episode(manifest, trace, &mut policy)?, None)
            }
            PolicySpec::RateBased => (sim.run_episode(manifest, trace, &mut RateBasedPolicy::default())?, None),
            PolicySpec::BufferBased => (sim.run_episode(manifest, trace, &mut BufferBasedPolicy::default())?, None),
            PolicySpec::Fixed { index } => {
                let mut policy: Box<dyn AbrPolicy> = Box::new(FixedPolicy::new(index, ladder)?);
                (sim.run_episode(manifest, trace, policy.as_mut())?, None)
            }
        };
        Ok((
            Episode {
                policy: spec.name(),
                trace_id: trace.id.clone(),
                chunks,
            },
            runtime_log,
        ))
    })?;
    let mut episodes = Vec::with_capacity(results.len());
    for (ep, runtime_log) in results {
        let ti = traces.iter().position(|t| t.id == ep.trace_id).expect("known trace");
        let header = EpisodeHeader {
            policy: ep.policy.clone(),
            manifest_id: manifests[ti].id.clone(),
            trace_id: ep.trace_id.clone(),
            qoe: cfg.qoe,
            chunks: ep.chunks.len(),
        };
        let path = episode_dir(out, &ep.policy).join(format!("{}.jsonl", ep.trace_id));
        write_text(&path, &episode_log(&header, &ep.chunks))?;
        if let Some(log) = runtime_log {
            write_text(&out.join("eval/runtime").join(format!("{}.jsonl", ep.trace_id)), &log)?;
        }
        episodes.push(ep);
    }
    record_stage(out, "eval", "evaluate", cfg)?;
    Ok(episodes)
}

/// Reads back the episode logs of one policy, sorted by trace id.
pub fn load_episodes(out: &Path, policy: &str) -> Result<Vec<Episode>> {
    let dir = episode_dir(out, policy);
    require(&dir, "evaluate")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let (header, chunks) = parse_episode_log(&text).map_err(|e| Error::json(p, e))?;
            Ok(Episode {
                policy: header.policy,
                trace_id: header.trace_id,
                chunks,
            })
        })
        .collect()
}

/// Empirical CDF as `(value, fraction ≤ value)` at each distinct value.
pub fn compute_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    Ok(out)
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Population standard deviation of per-chunk QoE.
pub fn qoe_std_per_trace(chunks: &[ChunkResult]) -> Result<f64, EvalError> {
    if chunks.len() < 2 {
        return Err(EvalError::TooFewChunks(chunks.len()));
    }
    let n = chunks.len() as f64;
    let mean = chunks.iter().map(|c| c.qoe).sum::<f64>() / n;
    Ok((chunks.iter().map(|c| (c.qoe - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-chunk means pooled over every evaluated chunk of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub traces: usize,
    pub chunks: usize,
    pub mean_qoe: f64,
    pub mean_utility: f64,
    pub mean_rebuffer: f64,
    pub mean_smoothness: f64,
    /// Mean per-chunk QoE of each trace, in trace-id order.
    pub per_trace_qoe: Vec<f64>,
    pub per_trace_qoe_std: Vec<f64>,
}

impl PolicySummary {
    pub fn from_episodes(policy: &str, episodes: &[Episode]) -> Result<Self, EvalError> {
        let chunks: Vec<&ChunkResult> = episodes.iter().flat_map(|e| &e.chunks).collect();
        if chunks.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let n = chunks.len() as f64;
        let mean = |f: fn(&ChunkResult) -> f64| chunks.iter().map(|c| f(c)).sum::<f64>() / n;
        Ok(Self {
            policy: policy.to_string(),
            traces: episodes.len(),
            chunks: chunks.len(),
            mean_qoe: mean(|c| c.qoe),
            mean_utility: mean(|c| c.utility),
            mean_rebuffer: mean(|c| c.rebuffer),
            mean_smoothness: mean(|c| c.smoothness),
            per_trace_qoe: episodes
                .iter()
                .map(|e| e.chunks.iter().map(|c| c.qoe).sum::<f64>() / e.chunks.len().max(1) as f64)
                .collect(),
            per_trace_qoe_std: episodes.iter().map(|e| qoe_std_per_trace(&e.chunks)).collect::<Result<_, _>>()?,
        })
    }

    /// `|mean_qoe - (utility - μ·rebuffer - λ·smoothness)|`.
    pub fn decomposition_gap(&self, qoe: &QoeParams) -> f64 {
        (self.mean_qoe - qoe.score(self.mean_utility, self.mean_rebuffer, self.mean_smoothness)).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub qoe: QoeParams,
    pub rows: Vec<PolicySummary>,
}

impl EvalSummary {
    pub fn row(&self, policy: &str) -> Option<&PolicySummary> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,traces,chunks,mean_qoe,mean_utility_mbps,mean_rebuffer_s_per_chunk,mean_smoothness_mbps\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.policy, r.traces, r.chunks, r.mean_qoe, r.mean_utility, r.mean_rebuffer, r.mean_smoothness
            ));
        }
        s
    }
}

pub fn cdf_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("value,fraction\n");
    for (v, f) in points {
        s.push_str(&format!("{v},{f}\n"));
    }
    s
}

pub fn parse_cdf_csv(text: &str) -> Option<Vec<(f64, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once(',')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })
        .collect()
}

pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.policies.len());
    for spec in &cfg.policies {
        let name = spec.name();
        let episodes = load_episodes(out, &name)?;
        let row = PolicySummary::from_episodes(&name, &episodes)?;
        let dir = out.join("report/cdf");
        write_text(&dir.join(format!("{name}.qoe.csv")), &cdf_csv(&compute_cdf(&row.per_trace_qoe)?))?;
        write_text(&dir.join(format!("{name}.qoe_std.csv")), &cdf_csv(&compute_cdf(&row.per_trace_qoe_std)?))?;
        rows.push(row);
    }
    let summary = EvalSummary { qoe: cfg.qoe, rows };
    write_json(&out.join("report/summary.json"), &summary)?;
    write_text(&out.join("report/summary.csv"), &summary.to_csv())?;
    record_stage(out, "report", "report", cfg)?;
    Ok(summary)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<EvalSummary> {
    cmd_corpus(cfg, out)?;
    cmd_cluster(cfg, out)?;
    cmd_train_classifier(cfg, out)?;
    cmd_train_zoo(cfg, out)?;
    cmd_evaluate(cfg, out)?;
    cmd_report(cfg, out)
}

/// Every regular file under `dir` as (relative path, bytes), sorted.
pub fn snapshot_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root").display().to_string();
                out.push((rel, fs::read(&path).map_err(|e| Error::io(&path, e))?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(qoe: f64) -> ChunkResult {
        ChunkResult {
            chunk: 0,
            bitrate_index: 0,
            size_bits: 1.0,
            download_time: 1.0,
            rebuffer: 0.0,
            sleep: 0.0,
            buffer_after: 4.0,
            throughput_mbps: 1.0,
            utility: qoe,
            smoothness: 0.0,
            qoe,
        }
    }

    #[test]
    fn cdf_examples() {
        let third = 1.0 / 3.0;
        assert_eq!(compute_cdf(&[3.0, 1.0, 2.0]).unwrap(), vec![(1.0, third), (2.0, 2.0 * third), (3.0, 1.0)]);
        assert_eq!(compute_cdf(&[2.0; 4]).unwrap(), vec![(2.0, 1.0)]);
        assert_eq!(median(&[0.0, 0.1, 10.0, 10.1]).unwrap(), 5.05);
        assert_eq!(compute_cdf(&[]).unwrap_err(), EvalError::EmptyInput);
    }

    #[test]
    fn qoe_std_examples() {
        assert_eq!(qoe_std_per_trace(&[chunk(1.5); 4]).unwrap(), 0.0);
        assert_eq!(qoe_std_per_trace(&[chunk(0.0), chunk(2.0)]).unwrap(), 1.0);
        let shifted = qoe_std_per_trace(&[chunk(7.0), chunk(9.0)]).unwrap();
        assert_eq!(shifted, 1.0);
        assert_eq!(qoe_std_per_trace(&[chunk(1.0)]).unwrap_err(), EvalError::TooFewChunks(1));
    }

    #[test]
    fn cdf_csv_round_trip() {
        let cdf = compute_cdf(&[0.1, -2.5, 3.75, 0.1]).unwrap();
        assert_eq!(parse_cdf_csv(&cdf_csv(&cdf)).unwrap(), cdf);
    }

    #[test]
    fn standard_policy_set_has_nine_rows() {
        let names: Vec<String> = PolicySpec::standard_set(5).iter().map(PolicySpec::name).collect();
        assert_eq!(names.len(), 9);
        assert_eq!(names[0], "ant");
        assert_eq!(names[8], "fixed-4");
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig::desk().validate().is_ok());
        let mut cfg = ExperimentConfig::desk();
        cfg.corpus.test_fraction = 0.3;
        assert!(matches!(cfg.validate(), Err(EvalError::ConfigInvalid(_))));
        let mut cfg = ExperimentConfig::desk();
        cfg.classifier.classes = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corpus_split_is_seeded_and_proportional() {
        let cfg = ExperimentConfig::desk();
        let a = corpus_manifest(&cfg);
        assert_eq!(a, corpus_manifest(&cfg));
        let test = a.ids(Split::Test).count();
        assert_eq!(test, 24);
        assert_eq!(a.traces.len(), 120);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_cluster(&ExperimentConfig::desk(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Eval(EvalError::MissingArtifact { ref stage, .. }) if stage == "corpus"));
    }
}
