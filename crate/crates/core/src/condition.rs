//! 1D-CNN network-condition classifier.
//!
//! Each convolutional stage runs three kernel scales side by side and
//! concatenates them, then applies batch norm, ReLU, a squeeze-and-excitation
//! gate, a residual connection from the stage input, a channel shuffle and a
//! width-preserving max pool. Two dropout-regularised dense layers and a
//! linear head follow. The stage layout is data ([`STAGE_PLAN`]) and the
//! forward pass walks it, so [`ConditionClassifier::layer_trace`] reports
//! exactly what ran.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{label_from_segment_labels, label_segment, segment_trace, ClusterModel, ConditionLabel, Segment};
use crate::tensor::{
    params_from_bytes, params_to_bytes, Adam, BatchNorm, Conv1d, Gradients, Linear, Mode, Padding, ParamStore,
    SeBlock, Tape, Tensor, Var,
};
use crate::trace::ResampledTrace;
use crate::{par, rng_for, Error, Result};

/// Floor on the per-window standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ConditionError {
    #[error("trace {trace_id} has {segments} segment(s); need at least {needed}")]
    TraceTooShort {
        trace_id: String,
        segments: usize,
        needed: usize,
    },
    #[error("dataset covers only {present} class(es); need at least 2")]
    ClassMissing { present: usize },
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("window has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Which segment's cluster a window is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelTarget {
    NextSegment,
    SameSegment,
}

/// How raw throughput windows become network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputStandardization {
    /// Each window by its own mean and standard deviation.
    PerWindow,
    /// One mean and standard deviation over all training windows.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionNetConfig {
    pub input_len: usize,
    pub kernels: Vec<usize>,
    /// Output channels of each stage (all kernel branches together).
    pub stage_channels: Vec<usize>,
    pub fc: Vec<usize>,
    pub classes: usize,
    pub se_ratio: usize,
    pub shuffle_groups: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub validation_fraction: f64,
    /// Seconds between consecutive dataset windows. `None` tiles the trace
    /// into aligned, non-overlapping segments.
    #[serde(default)]
    pub dataset_stride: Option<usize>,
    pub target: LabelTarget,
    pub standardization: InputStandardization,
    pub seed: u64,
}

impl ConditionNetConfig {
    /// Full-width layout: 64·3, 128·3 and 256·3 channels.
    pub fn new(classes: usize, seed: u64) -> Self {
        Self {
            input_len: 20,
            kernels: vec![3, 5, 7],
            stage_channels: vec![64 * 3, 128 * 3, 256 * 3],
            fc: vec![256, 128],
            classes,
            se_ratio: 4,
            shuffle_groups: 3,
            dropout: 0.5,
            batch_size: 80,
            learning_rate: 1e-4,
            max_epochs: 100,
            patience: None,
            target_accuracy: None,
            validation_fraction: 0.2,
            dataset_stride: None,
            target: LabelTarget::NextSegment,
            standardization: InputStandardization::Global,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        let bad = |m: String| Err(ConditionError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_len == 0 || self.stage_channels.is_empty() || self.kernels.is_empty() {
            return bad("empty layout".into());
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernels {:?} must be odd", self.kernels));
        }
        let div = self.kernels.len() * self.shuffle_groups;
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % self.kernels.len() != 0 || c % self.shuffle_groups != 0) {
            return bad(format!("stage width {c} not divisible by branches and groups ({div})"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch size and learning rate must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation fraction {}", self.validation_fraction));
        }
        Ok(())
    }
}

/// A raw history window and the class it should predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub trace_id: String,
    pub start: usize,
    pub raw: Vec<f64>,
    pub class: usize,
}

/// Standardizes a window by its own mean and standard deviation.
pub fn standardize_window(raw: &[f64]) -> Vec<f64> {
    let n = raw.len().max(1) as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    raw.iter().map(|v| (v - mean) / std).collect()
}

/// Builds windows from every trace whose own label (majority of its
/// segments at share `h`) is a cluster. Uncertain traces are skipped.
pub fn build_dataset(
    model: &ClusterModel,
    traces: &[ResampledTrace],
    target: LabelTarget,
    h: f64,
) -> Result<Vec<LabeledWindow>> {
    build_dataset_strided(model, traces, target, h, None)
}

/// Like [`build_dataset`], but with a window every `stride` seconds. An
/// unaligned window is labelled by assigning the raw window it predicts
/// (the following one for [`LabelTarget::NextSegment`]) to its nearest
/// centroid, which reproduces the aligned labels when `stride` equals the
/// segment length. Trace eligibility is still decided on aligned segments.
pub fn build_dataset_strided(
    model: &ClusterModel,
    traces: &[ResampledTrace],
    target: LabelTarget,
    h: f64,
    stride: Option<usize>,
) -> Result<Vec<LabeledWindow>> {
    let t = model.dim();
    if stride == Some(0) {
        return Err(ConditionError::InvalidConfig("dataset stride must be positive".into()).into());
    }
    let needed = match target {
        LabelTarget::NextSegment => 2,
        LabelTarget::SameSegment => 1,
    };
    let mut out = Vec::new();
    for trace in traces {
        let segments = if trace.len() < t { Vec::new() } else { segment_trace(trace, t)? };
        if segments.len() < needed {
            return Err(ConditionError::TraceTooShort {
                trace_id: trace.id.clone(),
                segments: segments.len(),
                needed,
            }
            .into());
        }
        let labels = segments
            .iter()
            .map(|s| label_segment(model, s))
            .collect::<Result<Vec<_>, _>>()?;
        if !matches!(label_from_segment_labels(&labels, h)?, ConditionLabel::Cluster(_)) {
            continue;
        }
        let shift = needed - 1;
        if let Some(stride) = stride {
            let mut start = 0;
            while start + needed * t <= trace.len() {
                let ahead = start + shift * t;
                let probe = Segment {
                    trace_id: trace.id.clone(),
                    start: ahead,
                    values: trace.values[ahead..ahead + t].to_vec(),
                };
                let ConditionLabel::Cluster(class) = label_segment(model, &probe)? else {
                    unreachable!("segments always label as clusters")
                };
                out.push(LabeledWindow {
                    trace_id: trace.id.clone(),
                    start,
                    raw: trace.values[start..start + t].to_vec(),
                    class,
                });
                start += stride;
            }
            continue;
        }
        for i in 0..segments.len() - shift {
            let ConditionLabel::Cluster(class) = labels[i + shift] else {
                unreachable!("segments always label as clusters")
            };
            out.push(LabeledWindow {
                trace_id: trace.id.clone(),
                start: segments[i].start,
                raw: segments[i].values.clone(),
                class,
            });
        }
    }
    Ok(out)
}

/// Input transform carried with a trained classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Standardizer {
    PerWindow,
    Global { mean: f64, std: f64 },
}

impl Standardizer {
    fn fit(mode: InputStandardization, windows: &[&LabeledWindow]) -> Self {
        match mode {
            InputStandardization::PerWindow => Standardizer::PerWindow,
            InputStandardization::Global => {
                let n = windows.iter().map(|w| w.raw.len()).sum::<usize>().max(1) as f64;
                let mean = windows.iter().flat_map(|w| &w.raw).sum::<f64>() / n;
                let var = windows.iter().flat_map(|w| &w.raw).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                Standardizer::Global {
                    mean,
                    std: var.sqrt().max(STD_FLOOR),
                }
            }
        }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        match *self {
            Standardizer::PerWindow => standardize_window(raw),
            Standardizer::Global { mean, std } => raw.iter().map(|v| (v - mean) / std).collect(),
        }
    }
}

/// Operations of one convolutional stage, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOp {
    MultiScaleConv,
    BatchNorm,
    Relu,
    SqueezeExcite,
    Residual,
    ChannelShuffle,
    MaxPool,
}

pub const STAGE_PLAN: [StageOp; 7] = [
    StageOp::MultiScaleConv,
    StageOp::BatchNorm,
    StageOp::Relu,
    StageOp::SqueezeExcite,
    StageOp::Residual,
    StageOp::ChannelShuffle,
    StageOp::MaxPool,
];

/// What the forward pass actually executed, for structural checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerEvent {
    StageStart(usize),
    Conv { kernel: usize, out_channels: usize },
    Concat { parts: usize },
    BatchNorm,
    Relu,
    SqueezeExcite,
    Projection,
    ResidualAdd,
    ChannelShuffle { groups: usize },
    MaxPool2,
    Flatten,
    Dense { outputs: usize },
    Dropout,
}

#[derive(Debug, Clone)]
struct Stage {
    branches: Vec<Conv1d>,
    bn: BatchNorm,
    se: SeBlock,
    projection: Option<Conv1d>,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<Stage>,
    dense: Vec<Linear>,
    head: Linear,
}

impl Layout {
    fn build(cfg: &ConditionNetConfig, store: &mut ParamStore) -> Self {
        let mut rng = rng_for(cfg.seed, 0xc0de);
        let mut cin = 1;
        let mut stages = Vec::new();
        for (si, &c) in cfg.stage_channels.iter().enumerate() {
            let per = c / cfg.kernels.len();
            let branches = cfg
                .kernels
                .iter()
                .map(|&k| Conv1d::new(store, &format!("stage{si}.conv{k}"), cin, per, k, Padding::Same, &mut rng))
                .collect();
            let bn = BatchNorm::new(store, &format!("stage{si}.bn"), c);
            let se = SeBlock::new(store, &format!("stage{si}.se"), c, cfg.se_ratio, &mut rng);
            let projection =
                (cin != c).then(|| Conv1d::new(store, &format!("stage{si}.proj"), cin, c, 1, Padding::Same, &mut rng));
            stages.push(Stage {
                branches,
                bn,
                se,
                projection,
            });
            cin = c;
        }
        let mut width = cin * cfg.input_len;
        let mut dense = Vec::new();
        for (i, &o) in cfg.fc.iter().enumerate() {
            dense.push(Linear::new(store, &format!("fc{i}"), width, o, &mut rng));
            width = o;
        }
        let head = Linear::new(store, "head", width, cfg.classes, &mut rng);
        Self { stages, dense, head }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    /// Mean unweighted cross-entropy on the validation windows.
    pub validation_loss: Vec<f64>,
    pub final_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
}

/// Trained CNN plus the input transform and provenance it needs.
#[derive(Debug, Clone)]
pub struct ConditionClassifier {
    pub config: ConditionNetConfig,
    pub standardizer: Standardizer,
    pub cluster_model_id: String,
    pub store: ParamStore,
    layout: Layout,
}

impl ConditionClassifier {
    /// Freshly initialised network.
    pub fn new(config: ConditionNetConfig, standardizer: Standardizer, cluster_model_id: String) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::build(&config, &mut store);
        Ok(Self {
            config,
            standardizer,
            cluster_model_id,
            store,
            layout,
        })
    }

    fn forward(&self, tape: &mut Tape, inputs: &[Vec<f64>], log: &mut Option<Vec<LayerEvent>>) -> Result<Var> {
        let mut emit = |e: LayerEvent| {
            if let Some(l) = log.as_mut() {
                l.push(e);
            }
        };
        let cfg = &self.config;
        let len = cfg.input_len;
        for w in inputs {
            if w.len() != len {
                return Err(ConditionError::ShapeMismatch {
                    expected: len,
                    got: w.len(),
                }
                .into());
            }
        }
        let data: Vec<f64> = inputs.iter().flatten().copied().collect();
        let mut x = tape.input(Tensor::new(vec![inputs.len(), 1, len], data)?);
        for (si, stage) in self.layout.stages.iter().enumerate() {
            emit(LayerEvent::StageStart(si));
            let stage_in = x;
            for op in STAGE_PLAN {
                x = match op {
                    StageOp::MultiScaleConv => {
                        let mut parts = Vec::with_capacity(stage.branches.len());
                        for b in &stage.branches {
                            parts.push(b.forward(tape, stage_in)?);
                            emit(LayerEvent::Conv {
                                kernel: b.kernel,
                                out_channels: b.out_channels,
                            });
                        }
                        emit(LayerEvent::Concat { parts: parts.len() });
                        tape.concat(&parts)?
                    }
                    StageOp::BatchNorm => {
                        emit(LayerEvent::BatchNorm);
                        stage.bn.forward(tape, x)?
                    }
                    StageOp::Relu => {
                        emit(LayerEvent::Relu);
                        tape.relu(x)?
                    }
                    StageOp::SqueezeExcite => {
                        emit(LayerEvent::SqueezeExcite);
                        stage.se.forward(tape, x)?
                    }
                    StageOp::Residual => {
                        let shortcut = match &stage.projection {
                            Some(p) => {
                                emit(LayerEvent::Projection);
                                p.forward(tape, stage_in)?
                            }
                            None => stage_in,
                        };
                        emit(LayerEvent::ResidualAdd);
                        tape.add(x, shortcut)?
                    }
                    StageOp::ChannelShuffle => {
                        emit(LayerEvent::ChannelShuffle {
                            groups: cfg.shuffle_groups,
                        });
                        tape.channel_shuffle(x, cfg.shuffle_groups)?
                    }
                    StageOp::MaxPool => {
                        emit(LayerEvent::MaxPool2);
                        tape.max_pool2(x)?
                    }
                };
            }
        }
        emit(LayerEvent::Flatten);
        x = tape.flatten(x)?;
        for d in &self.layout.dense {
            emit(LayerEvent::Dense { outputs: d.outputs });
            x = d.forward(tape, x)?;
            emit(LayerEvent::Relu);
            x = tape.relu(x)?;
            emit(LayerEvent::Dropout);
            x = tape.dropout(x, cfg.dropout)?;
        }
        emit(LayerEvent::Dense {
            outputs: self.layout.head.outputs,
        });
        Ok(self.layout.head.forward(tape, x)?)
    }

    /// Layer sequence executed by one inference pass.
    pub fn layer_trace(&self) -> Result<Vec<LayerEvent>> {
        let mut tape = Tape::new(&self.store, Mode::Infer, 0);
        let mut log = Some(Vec::new());
        self.forward(&mut tape, &[vec![0.0; self.config.input_len]], &mut log)?;
        Ok(log.unwrap_or_default())
    }

    /// Class probabilities for already-standardized inputs.
    pub fn probabilities(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let chunks: Vec<&[Vec<f64>]> = inputs.chunks(CHUNK).collect();
        let parts = par::try_map_range(chunks.len(), |i| -> Result<Vec<Vec<f64>>> {
            let mut tape = Tape::new(&self.store, Mode::Infer, 0);
            let logits = self.forward(&mut tape, chunks[i], &mut None)?;
            let p = tape.softmax(logits)?;
            Ok(tape.value(p).data.chunks(self.config.classes).map(<[f64]>::to_vec).collect())
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Label and its probability for one standardized window.
    pub fn predict_standardized(&self, input: &[f64]) -> Result<(ConditionLabel, f64)> {
        let p = self.probabilities(&[input.to_vec()])?.remove(0);
        let best = crate::abr::argmax(&p);
        Ok((ConditionLabel::Cluster(best), p[best]))
    }

    /// Label and its probability for a raw throughput window.
    pub fn predict(&self, raw: &[f64]) -> Result<(ConditionLabel, f64)> {
        self.predict_standardized(&self.standardizer.apply(raw))
    }

    pub fn accuracy(&self, windows: &[&LabeledWindow]) -> Result<f64> {
        Ok(self.evaluate(windows)?.0)
    }

    /// Accuracy and mean cross-entropy over `windows`.
    pub fn evaluate(&self, windows: &[&LabeledWindow]) -> Result<(f64, f64)> {
        if windows.is_empty() {
            return Ok((0.0, 0.0));
        }
        let inputs: Vec<Vec<f64>> = windows.iter().map(|w| self.standardizer.apply(&w.raw)).collect();
        let probs = self.probabilities(&inputs)?;
        let mut hits = 0usize;
        let mut loss = 0.0;
        for (p, w) in probs.iter().zip(windows) {
            hits += usize::from(crate::abr::argmax(p) == w.class);
            loss -= p[w.class].max(1e-12).ln();
        }
        let n = windows.len() as f64;
        Ok((hits as f64 / n, loss / n))
    }

    fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
    }

    /// Writes the parameter checkpoint and its JSON sidecar; returns the sidecar path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let (meta, params) = Self::paths(dir.as_ref(), stem);
        let sidecar = Sidecar {
            config: self.config.clone(),
            standardizer: self.standardizer,
            cluster_model_id: self.cluster_model_id.clone(),
            params: params.file_name().expect("file").to_string_lossy().into_owned(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&meta, e))?;
        fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))?;
        fs::write(&params, params_to_bytes(&self.store)).map_err(|e| Error::io(&params, e))?;
        Ok(meta)
    }

    pub fn load(meta: impl AsRef<Path>) -> Result<Self> {
        let meta = meta.as_ref();
        let text = fs::read_to_string(meta).map_err(|e| Error::io(meta, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(meta, e))?;
        let mut clf = Self::new(sidecar.config, sidecar.standardizer, sidecar.cluster_model_id)?;
        let path = meta.parent().unwrap_or(Path::new(".")).join(&sidecar.params);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        clf.store.copy_from(&params_from_bytes(&bytes)?)?;
        Ok(clf)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ConditionNetConfig,
    standardizer: Standardizer,
    cluster_model_id: String,
    params: String,
}

/// Whole-trace split: a seeded shuffle of trace ids, the last
/// `validation_fraction` (at least one) held out.
pub fn split_by_trace<'a>(
    windows: &'a [LabeledWindow],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a LabeledWindow>, Vec<&'a LabeledWindow>), ConditionError> {
    let ids: BTreeSet<&str> = windows.iter().map(|w| w.trace_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    if ids.len() < 2 {
        return Err(ConditionError::DegenerateDataset(format!(
            "{} trace(s); a whole-trace split needs at least 2",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng_for(seed, 0x5b1));
    let held = ((ids.len() as f64 * validation_fraction).round() as usize).clamp(1, ids.len() - 1);
    let val_ids: BTreeSet<&str> = ids[ids.len() - held..].iter().copied().collect();
    let (val, train) = windows.iter().partition(|w| val_ids.contains(w.trace_id.as_str()));
    Ok((train, val))
}

/// Inverse-frequency weights `n / (present · n_c)`; zero for absent classes.
pub fn class_weights(windows: &[&LabeledWindow], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for w in windows {
        counts[w.class] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                windows.len() as f64 / (present * c) as f64
            }
        })
        .collect()
}

/// Mini-batch Adam on class-weighted cross-entropy; keeps the parameters
/// from the epoch with the best validation accuracy, ties going to the
/// lower validation loss.
pub fn train_classifier(
    config: &ConditionNetConfig,
    dataset: &[LabeledWindow],
    cluster_model_id: &str,
) -> Result<(ConditionClassifier, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ConditionError::DegenerateDataset("no windows".into()).into());
    }
    if let Some(w) = dataset.iter().find(|w| w.class >= config.classes || w.raw.len() != config.input_len) {
        return Err(ConditionError::DegenerateDataset(format!(
            "window {}@{} does not fit {} classes × {} inputs",
            w.trace_id, w.start, config.classes, config.input_len
        ))
        .into());
    }
    let present: BTreeSet<usize> = dataset.iter().map(|w| w.class).collect();
    if present.len() < 2 {
        return Err(ConditionError::ClassMissing { present: present.len() }.into());
    }
    let (train, val) = split_by_trace(dataset, config.validation_fraction, config.seed)?;
    let standardizer = Standardizer::fit(config.standardization, &train);
    let mut clf = ConditionClassifier::new(config.clone(), standardizer, cluster_model_id.to_string())?;
    let weights = class_weights(&train, config.classes);
    let inputs: Vec<Vec<f64>> = train.iter().map(|w| standardizer.apply(&w.raw)).collect();
    let targets: Vec<usize> = train.iter().map(|w| w.class).collect();

    let mut adam = Adam::new(&clf.store, config.learning_rate);
    let mut grads = Gradients::zeros(&clf.store);
    let mut rng = rng_for(config.seed, 0xba7c);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (initial_acc, mut best_loss) = clf.evaluate(&val)?;
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_accuracy: Vec::new(),
        validation_loss: Vec::new(),
        final_accuracy: initial_acc,
        best_epoch: 0,
        epochs: 0,
        train_windows: train.len(),
        validation_windows: val.len(),
    };
    let mut best_store = clf.store.clone();
    let mut step = 0u64;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            step += 1;
            let (loss, updates) = {
                let mut tape = Tape::new(&clf.store, Mode::Train, config.seed ^ step.wrapping_mul(0x9e37_79b9));
                let logits = clf.forward(&mut tape, &xs, &mut None)?;
                let loss = tape.cross_entropy(logits, &ys, &weights)?;
                tape.backward(loss, &mut grads)?;
                (tape.value(loss).data[0], tape.running_stat_updates().to_vec())
            };
            adam.step(&mut clf.store, &mut grads)?;
            clf.store.apply_running_stats(&updates, 0.9);
            loss_sum += loss * batch.len() as f64;
        }
        let (acc, val_loss) = clf.evaluate(&val)?;
        report.train_loss.push(loss_sum / train.len() as f64);
        report.validation_accuracy.push(acc);
        report.validation_loss.push(val_loss);
        report.epochs = epoch;
        let better = acc > report.final_accuracy || (acc == report.final_accuracy && val_loss < best_loss);
        if better || report.best_epoch == 0 {
            report.final_accuracy = acc;
            best_loss = val_loss;
            report.best_epoch = epoch;
            best_store = clf.store.clone();
        }
        let reached = config.target_accuracy.is_some_and(|t| acc >= t);
        if reached || config.patience.is_some_and(|p| epoch - report.best_epoch >= p) {
            break;
        }
    }
    clf.store = best_store;
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn narrow(classes: usize, seed: u64) -> ConditionNetConfig {
        ConditionNetConfig {
            stage_channels: vec![6, 6, 12],
            fc: vec![16, 8],
            batch_size: 16,
            learning_rate: 3e-3,
            ..ConditionNetConfig::new(classes, seed)
        }
    }

    fn window(trace: &str, start: usize, raw: Vec<f64>, class: usize) -> LabeledWindow {
        LabeledWindow {
            trace_id: trace.into(),
            start,
            raw,
            class,
        }
    }

    fn level_model() -> ClusterModel {
        // Two clusters at 1 and 5 Mbit/s on 4-sample segments.
        ClusterModel {
            k: 2,
            centroids: vec![vec![-1.0; 4], vec![1.0; 4]],
            feature_mean: vec![3.0; 4],
            feature_std: vec![2.0; 4],
            seed: 0,
        }
    }

    #[test]
    fn dataset_pairs_with_next_segment() {
        let m = level_model();
        let t = ResampledTrace::from_values(
            "t",
            [[1.0; 4], [1.0; 4], [5.0; 4], [1.0; 4]].concat(),
        );
        let ds = build_dataset(&m, &[t.clone()], LabelTarget::NextSegment, 0.5).unwrap();
        assert_eq!(ds.iter().map(|w| (w.start, w.class)).collect::<Vec<_>>(), vec![(0, 0), (4, 1), (8, 0)]);
        let same = build_dataset(&m, &[t], LabelTarget::SameSegment, 0.5).unwrap();
        assert_eq!(same.iter().map(|w| w.class).collect::<Vec<_>>(), vec![0, 0, 1, 0]);

        let short = ResampledTrace::from_values("s", vec![1.0; 5]);
        assert!(matches!(
            build_dataset(&m, &[short], LabelTarget::NextSegment, 0.5),
            Err(Error::Condition(ConditionError::TraceTooShort { segments: 1, .. }))
        ));
    }

    #[test]
    fn strided_dataset_matches_aligned_and_shifts_labels() {
        let m = level_model();
        let t = ResampledTrace::from_values("t", [[1.0; 4], [1.0; 4], [5.0; 4], [1.0; 4]].concat());
        for target in [LabelTarget::NextSegment, LabelTarget::SameSegment] {
            let aligned = build_dataset(&m, &[t.clone()], target, 0.5).unwrap();
            let strided = build_dataset_strided(&m, &[t.clone()], target, 0.5, Some(4)).unwrap();
            assert_eq!(aligned, strided);
        }
        let fine = build_dataset_strided(&m, &[t.clone()], LabelTarget::NextSegment, 0.5, Some(1)).unwrap();
        assert_eq!(fine.len(), 9);
        assert_eq!(fine[7].raw, vec![1.0, 5.0, 5.0, 5.0]);
        // Ahead of starts 1, 3, 5 and 7: [1,1,1,5], [1,5,5,5], [5,5,5,1], [5,1,1,1].
        let odd: Vec<_> = fine.iter().skip(1).step_by(2).map(|w| w.class).collect();
        assert_eq!(odd, vec![0, 1, 1, 0]);
        assert!(build_dataset_strided(&m, &[t], LabelTarget::NextSegment, 0.5, Some(0)).is_err());
    }

    #[test]
    fn uncertain_traces_are_skipped() {
        let m = level_model();
        let mixed = ResampledTrace::from_values("m", [[1.0; 4], [5.0; 4]].concat());
        assert!(build_dataset(&m, &[mixed], LabelTarget::NextSegment, 2.0 / 3.0).unwrap().is_empty());
    }

    #[test]
    fn constant_window_standardizes_to_zero() {
        assert_eq!(standardize_window(&[2.5; 20]), vec![0.0; 20]);
        let z = standardize_window(&[1.0, 3.0]);
        assert_eq!(z, vec![-1.0, 1.0]);
    }

    #[test]
    fn class_weights_are_inverse_frequency() {
        let ws: Vec<LabeledWindow> = [0, 0, 0, 1].iter().map(|&c| window("a", 0, vec![], c)).collect();
        let refs: Vec<&LabeledWindow> = ws.iter().collect();
        let w = class_weights(&refs, 3);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn split_is_per_trace() {
        let ws: Vec<LabeledWindow> = (0..10)
            .flat_map(|t| (0..3).map(move |s| window(&format!("t{t}"), s * 20, vec![], 0)))
            .collect();
        let (train, val) = split_by_trace(&ws, 0.2, 4).unwrap();
        assert_eq!((train.len(), val.len()), (24, 6));
        let val_ids: BTreeSet<_> = val.iter().map(|w| &w.trace_id).collect();
        assert!(train.iter().all(|w| !val_ids.contains(&w.trace_id)));
        assert!(matches!(
            split_by_trace(&ws[..3], 0.2, 4),
            Err(ConditionError::DegenerateDataset(_))
        ));
    }

    #[test]
    fn single_class_is_rejected() {
        let ws: Vec<LabeledWindow> = (0..6).map(|i| window(&format!("t{i}"), 0, vec![1.0; 20], 1)).collect();
        assert!(matches!(
            train_classifier(&narrow(2, 0), &ws, "m"),
            Err(Error::Condition(ConditionError::ClassMissing { present: 1 }))
        ));
    }

    #[test]
    fn config_rejects_bad_widths() {
        let mut cfg = narrow(3, 0);
        cfg.stage_channels = vec![8];
        assert!(cfg.validate().is_err());
        cfg = narrow(1, 0);
        assert!(cfg.validate().is_err());
        assert!(ConditionNetConfig::new(5, 0).validate().is_ok());
    }

    #[test]
    fn inference_is_deterministic_and_normalized() {
        let clf = ConditionClassifier::new(narrow(3, 2), Standardizer::PerWindow, "m".into()).unwrap();
        let w: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let a = clf.predict(&w).unwrap();
        assert_eq!(a, clf.predict(&w).unwrap());
        assert!(a.1 > 0.0 && a.1 <= 1.0);
        let p = clf.probabilities(&[standardize_window(&w)]).unwrap();
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            clf.predict(&[1.0; 7]),
            Err(Error::Condition(ConditionError::ShapeMismatch { expected: 20, got: 7 }))
        ));
    }
}
