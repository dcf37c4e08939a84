//! Actor-critic training of bitrate policies, and the per-condition model zoo.
//!
//! Training proceeds in synchronous rounds. In each round every worker
//! plays one episode against the same parameter snapshot and computes its
//! gradients; a single applier then folds the worker gradients into the
//! shared parameters one after another, in worker order. Results therefore
//! depend on the seed and the worker count but not on thread scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{AbrPolicy, GreedyPolicy, NormalizedObservation, RateBasedPolicy, ObservationBuilder, PolicyArch, PolicyModel};
use crate::cluster::ConditionLabel;
use crate::sim::{SimState, Simulator, VideoManifest};
use crate::tensor::{Adam, Gradients, Mode, Tape};
use crate::trace::ResampledTrace;
use crate::{par, rng_for, Error, Result};

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("rollout is empty")]
    EmptyRollout,
    #[error("no traces to train {0} on")]
    NoTraces(String),
    #[error("no video manifests supplied")]
    NoManifests,
    #[error("rollout fields have inconsistent lengths")]
    ShapeMismatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("zoo has no entry for {0}")]
    MissingEntry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_weight: f64,
    /// Entropy weight reached by linear decay at the last round; `None`
    /// keeps it constant.
    pub entropy_final: Option<f64>,
    pub workers: usize,
    pub gamma: f64,
    /// Episodes per model, summed over all workers.
    pub episodes: usize,
    /// Validate every this many rounds.
    pub eval_every: usize,
    pub seed: u64,
    pub arch: PolicyArch,
    /// Rewards are multiplied by this before returns are formed, so the
    /// critic learns values in scaled units.
    #[serde(default = "unit_scale")]
    pub reward_scale: f64,
    /// Standardise advantages within each rollout before the actor step.
    #[serde(default)]
    pub normalize_advantages: bool,
    /// Upper bound of a random-length prefix, played by the rate-based
    /// heuristic and excluded from the rollout, before each training
    /// episode. Exposes models that take over mid-session to mid-session
    /// states. `train_zoo` applies it to every model except General.
    #[serde(default)]
    pub warm_start_chunks: usize,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            entropy_weight: 0.5,
            entropy_final: None,
            workers: 16,
            gamma: 0.99,
            episodes: 20_000,
            eval_every: 10,
            seed: 0,
            arch: PolicyArch::default(),
            reward_scale: 1.0,
            normalize_advantages: false,
            warm_start_chunks: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.to_string()));
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.entropy_weight >= 0.0) || self.entropy_final.is_some_and(|b| !(b >= 0.0)) {
            return bad("entropy weight must be non-negative");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward scale must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.workers == 0 || self.eval_every == 0 {
            return bad("workers and eval_every must be positive");
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.episodes.div_ceil(self.workers)
    }

    fn entropy_at(&self, round: usize) -> f64 {
        match self.entropy_final {
            None => self.entropy_weight,
            Some(end) => {
                let span = self.rounds().saturating_sub(1).max(1) as f64;
                let frac = (round as f64 / span).min(1.0);
                self.entropy_weight + (end - self.entropy_weight) * frac
            }
        }
    }
}

/// One episode's trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub observations: Vec<NormalizedObservation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<(), RlError> {
        let n = self.actions.len();
        if n == 0 {
            return Err(RlError::EmptyRollout);
        }
        if self.observations.len() != n || self.rewards.len() != n || self.values.len() != n {
            return Err(RlError::ShapeMismatch);
        }
        Ok(())
    }
}

/// Discounted returns to the end of the episode and `return - value`.
pub fn compute_advantages(rewards: &[f64], values: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if rewards.is_empty() {
        return Err(RlError::EmptyRollout);
    }
    if values.len() != rewards.len() {
        return Err(RlError::ShapeMismatch);
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    let adv = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    Ok((returns, adv))
}

/// Loss values of one rollout, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub actor: f64,
    pub critic: f64,
    /// Mean per-step policy entropy.
    pub entropy: f64,
}

/// Gradients of both losses for one rollout.
pub struct RolloutGradients {
    pub actor: Gradients,
    pub critic: Gradients,
    pub report: LossReport,
}

/// Builds both losses on tapes and back-propagates them.
pub fn rollout_gradients(model: &PolicyModel, rollout: &Rollout, gamma: f64, beta: f64) -> Result<RolloutGradients> {
    rollout_gradients_with(
        model,
        rollout,
        &LossSettings {
            gamma,
            beta,
            reward_scale: 1.0,
            normalize_advantages: false,
        },
    )
}

/// Knobs of the actor-critic loss beyond the discount and entropy weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub gamma: f64,
    pub beta: f64,
    pub reward_scale: f64,
    pub normalize_advantages: bool,
}

/// Standardises `xs` to zero mean and unit variance; leaves a constant
/// vector centred at zero.
pub fn standardize_advantages(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-8 { (*x - mean) / std } else { 0.0 };
    }
}

pub fn rollout_gradients_with(model: &PolicyModel, rollout: &Rollout, settings: &LossSettings) -> Result<RolloutGradients> {
    rollout.check()?;
    let LossSettings { gamma, beta, .. } = *settings;
    let rewards: Vec<f64> = rollout.rewards.iter().map(|r| r * settings.reward_scale).collect();
    let (returns, mut advantages) = compute_advantages(&rewards, &rollout.values, gamma)?;
    if settings.normalize_advantages {
        standardize_advantages(&mut advantages);
    }
    let batch = model.batch(&rollout.observations)?;

    let mut tape = Tape::new(&model.actor.store, Mode::Train, 0);
    let logits = model.actor.forward(&mut tape, &batch)?;
    let probs = tape.softmax(logits)?;
    let k = model.arch.actions;
    let entropy = tape
        .value(probs)
        .data
        .chunks(k)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / rollout.len() as f64;
    let loss = tape.actor_loss(logits, &rollout.actions, &advantages, beta)?;
    let mut actor = Gradients::zeros(&model.actor.store);
    tape.backward(loss, &mut actor)?;
    let actor_loss = tape.value(loss).data[0];

    let mut tape = Tape::new(&model.critic.store, Mode::Train, 0);
    let values = model.critic.forward(&mut tape, &batch)?;
    let closs = tape.squared_error(values, &returns)?;
    let mut critic = Gradients::zeros(&model.critic.store);
    tape.backward(closs, &mut critic)?;
    let critic_loss = tape.value(closs).data[0];

    Ok(RolloutGradients {
        actor,
        critic,
        report: LossReport {
            actor: actor_loss,
            critic: critic_loss,
            entropy,
        },
    })
}

/// Actor and critic loss of a rollout without gradients.
pub fn losses(model: &PolicyModel, rollout: &Rollout, gamma: f64, beta: f64) -> Result<LossReport> {
    Ok(rollout_gradients(model, rollout, gamma, beta)?.report)
}

/// Plays one episode sampling from the actor.
pub fn collect_rollout(
    model: &PolicyModel,
    sim: &Simulator,
    manifest: &VideoManifest,
    trace: &ResampledTrace,
    start_cursor: f64,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    collect_rollout_warm(model, sim, manifest, trace, start_cursor, 0, rng)
}

/// Like [`collect_rollout`], but the first `prefix` chunks (capped so at
/// least one remains) are chosen by the rate-based heuristic and left out
/// of the rollout; the actor continues from the resulting buffer and history.
pub fn collect_rollout_warm(
    model: &PolicyModel,
    sim: &Simulator,
    manifest: &VideoManifest,
    trace: &ResampledTrace,
    start_cursor: f64,
    prefix: usize,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let mut state = SimState::start(start_cursor);
    let mut builder = ObservationBuilder::new(manifest);
    let mut heuristic = RateBasedPolicy::default();
    for _ in 0..prefix.min(manifest.total_chunks().saturating_sub(1)) {
        let action = heuristic.select(&builder.observe(&state))?;
        let (result, next) = sim.step(&state, manifest, trace, action)?;
        builder.record(&result);
        heuristic.observe(&result)?;
        state = next;
    }
    let mut rollout = Rollout::default();
    while state.chunks_sent < manifest.total_chunks() {
        let obs = builder.observe(&state).normalize();
        let action = model.sample_action(&obs, rng)?;
        let (result, next) = sim.step(&state, manifest, trace, action)?;
        builder.record(&result);
        rollout.observations.push(obs);
        rollout.actions.push(action);
        rollout.rewards.push(result.qoe);
        state = next;
    }
    rollout.values = model.critic_values(&rollout.observations)?;
    Ok(rollout)
}

/// Mean per-chunk QoE of the greedy policy over every (trace, manifest)
/// pair, each episode starting at the beginning of the trace.
pub fn evaluate_greedy(
    model: &PolicyModel,
    sim: &Simulator,
    manifests: &[VideoManifest],
    traces: &[&ResampledTrace],
) -> Result<f64> {
    let pairs = traces.len() * manifests.len();
    let per_episode = par::try_map_range(pairs, |i| -> Result<f64> {
        let mut policy = GreedyPolicy { model, label: "eval" };
        let results = sim.run_episode(&manifests[i % manifests.len()], traces[i / manifests.len()], &mut policy)?;
        Ok(results.iter().map(|r| r.qoe).sum::<f64>() / results.len() as f64)
    })?;
    Ok(per_episode.iter().sum::<f64>() / pairs.max(1) as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub model: String,
    pub round: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy_weight: f64,
    pub validation_qoe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_round: usize,
    pub best_validation_qoe: f64,
    pub log: Vec<TrainLogEntry>,
}

/// Splits a trace subset into training and validation slices: a fifth (at
/// least one trace) is held out when five or more traces are available,
/// otherwise every trace is used for both.
pub fn validation_split<'a>(traces: &[&'a ResampledTrace]) -> (Vec<&'a ResampledTrace>, Vec<&'a ResampledTrace>) {
    if traces.len() < 5 {
        return (traces.to_vec(), traces.to_vec());
    }
    let held = (traces.len() / 5).max(1);
    let (train, val) = traces.split_at(traces.len() - held);
    (train.to_vec(), val.to_vec())
}

/// Trains one actor-critic pair on `traces`; returns the parameters with
/// the best greedy validation QoE.
pub fn train_model(
    cfg: &TrainConfig,
    name: &str,
    traces: &[&ResampledTrace],
    manifests: &[VideoManifest],
    sim: &Simulator,
) -> Result<(PolicyModel, TrainOutcome)> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(RlError::NoTraces(name.to_string()).into());
    }
    if manifests.is_empty() {
        return Err(RlError::NoManifests.into());
    }
    let (train, val) = validation_split(traces);
    let mut model = PolicyModel::new(cfg.arch, cfg.seed)?;
    let mut actor_opt = Adam::new(&model.actor.store, cfg.actor_lr);
    let mut critic_opt = Adam::new(&model.critic.store, cfg.critic_lr);
    let mut best = model.clone();
    let mut best_qoe = evaluate_greedy(&model, sim, manifests, &val)?;
    let mut outcome = TrainOutcome {
        best_round: 0,
        best_validation_qoe: best_qoe,
        log: Vec::new(),
    };
    let rounds = cfg.rounds();
    for round in 0..rounds {
        let workers = cfg.workers.min(cfg.episodes - round * cfg.workers);
        let beta = cfg.entropy_at(round);
        let snapshot = &model;
        let results = par::try_map_range(workers, |w| -> Result<(RolloutGradients, f64)> {
            let mut rng = rng_for(cfg.seed, ((round as u64) << 20) | w as u64 | 1 << 62);
            let trace = train[rng.random_range(0..train.len())];
            let manifest = &manifests[rng.random_range(0..manifests.len())];
            let start = rng.random_range(0..trace.len()) as f64;
            let prefix = if cfg.warm_start_chunks > 0 {
                rng.random_range(0..=cfg.warm_start_chunks)
            } else {
                0
            };
            let rollout = collect_rollout_warm(snapshot, sim, manifest, trace, start, prefix, &mut rng)?;
            let reward = rollout.rewards.iter().sum::<f64>() / rollout.len() as f64;
            let settings = LossSettings {
                gamma: cfg.gamma,
                beta,
                reward_scale: cfg.reward_scale,
                normalize_advantages: cfg.normalize_advantages,
            };
            Ok((rollout_gradients_with(snapshot, &rollout, &settings)?, reward))
        })?;
        let mut entry = TrainLogEntry {
            model: name.to_string(),
            round,
            episodes: (round * cfg.workers + workers),
            mean_reward: 0.0,
            mean_entropy: 0.0,
            actor_loss: 0.0,
            critic_loss: 0.0,
            entropy_weight: beta,
            validation_qoe: None,
        };
        for (mut g, reward) in results {
            actor_opt.step(&mut model.actor.store, &mut g.actor)?;
            critic_opt.step(&mut model.critic.store, &mut g.critic)?;
            entry.mean_reward += reward / workers as f64;
            entry.mean_entropy += g.report.entropy / workers as f64;
            entry.actor_loss += g.report.actor / workers as f64;
            entry.critic_loss += g.report.critic / workers as f64;
        }
        if (round + 1) % cfg.eval_every == 0 || round + 1 == rounds {
            let q = evaluate_greedy(&model, sim, manifests, &val)?;
            entry.validation_qoe = Some(q);
            if q > best_qoe {
                best_qoe = q;
                best = model.clone();
                outcome.best_round = round + 1;
                outcome.best_validation_qoe = q;
            }
        }
        outcome.log.push(entry);
    }
    Ok((best, outcome))
}

pub fn training_log_jsonl(entries: &[TrainLogEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("log entry serialises") + "\n")
        .collect()
}

/// Where a zoo label's checkpoint lives and whether it borrows another model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooIndexEntry {
    pub label: ConditionLabel,
    pub path: String,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooIndex {
    pub k: usize,
    pub entries: Vec<ZooIndexEntry>,
}

/// One model per cluster plus General and Uncertain. Labels without their
/// own training data resolve to General.
#[derive(Debug, Clone)]
pub struct ModelZoo {
    pub k: usize,
    models: BTreeMap<ConditionLabel, PolicyModel>,
}

impl ModelZoo {
    pub fn new(k: usize, general: PolicyModel) -> Self {
        let mut models = BTreeMap::new();
        models.insert(ConditionLabel::General, general);
        Self { k, models }
    }

    pub fn insert(&mut self, label: ConditionLabel, model: PolicyModel) {
        self.models.insert(label, model);
    }

    pub fn labels(&self) -> Vec<ConditionLabel> {
        let mut out: Vec<_> = (0..self.k).map(ConditionLabel::Cluster).collect();
        out.push(ConditionLabel::General);
        out.push(ConditionLabel::Uncertain);
        out
    }

    pub fn is_fallback(&self, label: ConditionLabel) -> bool {
        !self.models.contains_key(&label)
    }

    pub fn general(&self) -> &PolicyModel {
        &self.models[&ConditionLabel::General]
    }

    /// The model serving `label`.
    pub fn resolve(&self, label: ConditionLabel) -> Result<&PolicyModel, RlError> {
        if let ConditionLabel::Cluster(c) = label {
            if c >= self.k {
                return Err(RlError::MissingEntry(label.to_string()));
            }
        }
        Ok(self.models.get(&label).unwrap_or_else(|| self.general()))
    }

    pub fn index(&self) -> ZooIndex {
        ZooIndex {
            k: self.k,
            entries: self
                .labels()
                .into_iter()
                .map(|label| {
                    let fallback = self.is_fallback(label);
                    let owner = if fallback { ConditionLabel::General } else { label };
                    ZooIndexEntry {
                        label,
                        path: format!("{owner}.json"),
                        fallback,
                    }
                })
                .collect(),
        }
    }

    /// Writes every owned model plus `index.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (label, model) in &self.models {
            model.save(dir, &label.to_string())?;
        }
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&self.index()).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: ZooIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let general = index
            .entries
            .iter()
            .find(|e| e.label == ConditionLabel::General)
            .ok_or_else(|| RlError::MissingEntry("general".into()))?;
        let mut zoo = Self::new(index.k, PolicyModel::load(dir.join(&general.path))?);
        for e in index.entries.iter().filter(|e| !e.fallback && e.label != ConditionLabel::General) {
            zoo.insert(e.label, PolicyModel::load(dir.join(&e.path))?);
        }
        Ok(zoo)
    }
}

/// Trains General on every trace, one model per cluster that has traces,
/// and Uncertain if any trace is labelled so. Each model gets its own seed
/// derived from `cfg.seed`.
pub fn train_zoo(
    cfg: &TrainConfig,
    k: usize,
    labeled: &[(ResampledTrace, ConditionLabel)],
    manifests: &[VideoManifest],
    sim: &Simulator,
) -> Result<(ModelZoo, Vec<TrainOutcome>)> {
    if labeled.is_empty() {
        return Err(RlError::NoTraces("general".into()).into());
    }
    let all: Vec<&ResampledTrace> = labeled.iter().map(|(t, _)| t).collect();
    let with_seed = |offset: u64| TrainConfig {
        seed: cfg.seed.wrapping_add(offset),
        ..*cfg
    };
    let general_cfg = TrainConfig {
        warm_start_chunks: 0,
        ..with_seed(0)
    };
    let (general, out) = train_model(&general_cfg, "general", &all, manifests, sim)?;
    let mut zoo = ModelZoo::new(k, general);
    let mut outcomes = vec![out];
    let mut targets: Vec<ConditionLabel> = (0..k).map(ConditionLabel::Cluster).collect();
    targets.push(ConditionLabel::Uncertain);
    for (i, label) in targets.into_iter().enumerate() {
        let subset: Vec<&ResampledTrace> = labeled.iter().filter(|(_, l)| *l == label).map(|(t, _)| t).collect();
        if subset.is_empty() {
            continue;
        }
        let (model, out) = train_model(&with_seed(1 + i as u64), &label.to_string(), &subset, manifests, sim)?;
        zoo.insert(label, model);
        outcomes.push(out);
    }
    Ok((zoo, outcomes))
}
