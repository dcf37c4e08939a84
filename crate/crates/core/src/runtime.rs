//! The ANT controller: classify the trailing throughput window at every
//! segment boundary, gate the result through the 2-of-3 confidence rule,
//! and answer bitrate queries with the active condition's model.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{AbrPolicy, Observation, PolicyError};
use crate::cluster::ConditionLabel;
use crate::condition::ConditionClassifier;
use crate::rl::{ModelZoo, RlError};
use crate::sim::ChunkResult;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("classifier unavailable: {0}")]
    ClassifierUnavailable(String),
    #[error("zoo has no model for {0}")]
    ZooMissingEntry(String),
    #[error("invalid runtime config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<RuntimeError> for PolicyError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Policy(p) => p,
            other => PolicyError::Controller(other.to_string()),
        }
    }
}

/// Maps a raw throughput window to a condition.
pub trait WindowClassifier {
    fn classify(&self, window: &[f64]) -> Result<ConditionLabel, RuntimeError>;
}

impl WindowClassifier for ConditionClassifier {
    fn classify(&self, window: &[f64]) -> Result<ConditionLabel, RuntimeError> {
        self.predict(window)
            .map(|(label, _)| label)
            .map_err(|e| RuntimeError::ClassifierUnavailable(e.to_string()))
    }
}

/// Returns the same label for every window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantClassifier(pub ConditionLabel);

impl WindowClassifier for ConstantClassifier {
    fn classify(&self, _window: &[f64]) -> Result<ConditionLabel, RuntimeError> {
        Ok(self.0)
    }
}

/// Which earlier results a new recognition must agree with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionRule {
    /// At least two of the three results queued before it.
    PreviousThree,
    /// At least two of a three-slot window that includes the new result,
    /// i.e. at least one of the two before it.
    IncludingCurrent,
}

/// Sliding queue of the most recent raw recognition results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWindow {
    pub results: VecDeque<ConditionLabel>,
    pub active: ConditionLabel,
    pub rule: AdmissionRule,
}

impl ConfidenceWindow {
    pub const LEN: usize = 3;

    pub fn new(rule: AdmissionRule) -> Self {
        Self {
            results: VecDeque::with_capacity(Self::LEN),
            active: ConditionLabel::General,
            rule,
        }
    }

    fn queue(&mut self, result: ConditionLabel) {
        if self.results.len() == Self::LEN {
            self.results.pop_front();
        }
        self.results.push_back(result);
    }

    /// Queues a result without gating; General stays active.
    pub fn warm(&mut self, result: ConditionLabel) {
        self.queue(result);
        self.active = ConditionLabel::General;
    }

    /// Applies the admission rule, queues the result and returns whether it
    /// was admitted. A rejected result makes Uncertain active.
    pub fn admit(&mut self, result: ConditionLabel) -> bool {
        let considered = match self.rule {
            AdmissionRule::PreviousThree => Self::LEN,
            AdmissionRule::IncludingCurrent => Self::LEN - 1,
        };
        let agree = self.results.iter().rev().take(considered).filter(|&&r| r == result).count();
        let needed = match self.rule {
            AdmissionRule::PreviousThree => 2,
            AdmissionRule::IncludingCurrent => 1,
        };
        let admitted = agree >= needed;
        self.active = if admitted { result } else { ConditionLabel::Uncertain };
        self.queue(result);
        admitted
    }
}

/// Trailing 1 Hz throughput history rebuilt from chunk downloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRing {
    capacity: usize,
    values: VecDeque<f64>,
    /// Seconds fully accounted for so far.
    completed: usize,
    /// Time-weighted throughput and covered time within the open second.
    partial_sum: f64,
    partial_time: f64,
    last: f64,
}

impl ThroughputRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
            completed: 0,
            partial_sum: 0.0,
            partial_time: 0.0,
            last: 0.0,
        }
    }

    pub fn values(&self) -> &VecDeque<f64> {
        &self.values
    }

    pub fn completed_seconds(&self) -> usize {
        self.completed
    }

    fn close_second(&mut self) {
        let v = if self.partial_time > 0.0 {
            self.partial_sum / self.partial_time
        } else {
            self.last
        };
        self.last = v;
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.completed += 1;
        self.partial_sum = 0.0;
        self.partial_time = 0.0;
    }

    /// Advances from `from` by `duration` seconds. `rate` is the throughput
    /// observed over the span, or `None` while idle; idle seconds repeat the
    /// previous value.
    pub fn advance(&mut self, from: f64, duration: f64, rate: Option<f64>) {
        let end = from + duration;
        let mut t = from;
        while t < end {
            let boundary = (self.completed + 1) as f64;
            let step = (boundary.min(end) - t).max(0.0);
            if let Some(r) = rate {
                self.partial_sum += r * step;
                self.partial_time += step;
            }
            t += step;
            if t >= boundary {
                self.close_second();
            } else {
                break;
            }
        }
    }

    /// The `len` seconds ending at second `end`. Seconds not retained are
    /// filled with the oldest retained value.
    pub fn window(&self, end: usize, len: usize) -> Vec<f64> {
        let first_kept = self.completed - self.values.len();
        let end = end.min(self.completed).max(first_kept);
        let start = end.saturating_sub(len).max(first_kept);
        let mut out: Vec<f64> = self.values.range(start - first_kept..end - first_kept).copied().collect();
        if out.len() < len {
            let fill = out.first().copied().unwrap_or(0.0);
            out.splice(0..0, std::iter::repeat_n(fill, len - out.len()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub segment_seconds: usize,
    pub warmup_seconds: usize,
    pub ring_seconds: usize,
    pub rule: AdmissionRule,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 20,
            warmup_seconds: 60,
            ring_seconds: 60,
            rule: AdmissionRule::PreviousThree,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.segment_seconds == 0 || self.ring_seconds < self.segment_seconds {
            return Err(RuntimeError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One line of the runtime event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub clock: f64,
    pub classified: ConditionLabel,
    pub admitted: bool,
    pub active: ConditionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeState {
    pub config: RuntimeConfig,
    pub clock: f64,
    pub ring: ThroughputRing,
    pub window: ConfidenceWindow,
    next_tick: usize,
    pub events: Vec<RuntimeEvent>,
}

impl RuntimeState {
    pub fn new(config: RuntimeConfig) -> Result<Self, RuntimeError> {
        config.validate()?;
        Ok(Self {
            config,
            clock: 0.0,
            ring: ThroughputRing::new(config.ring_seconds),
            window: ConfidenceWindow::new(config.rule),
            next_tick: config.segment_seconds,
            events: Vec::new(),
        })
    }

    pub fn active(&self) -> ConditionLabel {
        self.window.active
    }

    /// Records a downloaded chunk: its throughput over the download, then
    /// idle time while the player slept.
    pub fn observe(&mut self, result: &ChunkResult) {
        self.ring.advance(self.clock, result.download_time, Some(result.throughput_mbps));
        self.clock += result.download_time;
        self.ring.advance(self.clock, result.sleep, None);
        self.clock += result.sleep;
    }

    /// Boundaries already passed by the clock and not yet processed.
    pub fn pending_ticks(&self) -> bool {
        self.clock >= self.next_tick as f64
    }

    /// Processes the next segment boundary.
    pub fn tick(&mut self, classifier: &dyn WindowClassifier) -> Result<RuntimeEvent, RuntimeError> {
        let boundary = self.next_tick;
        let window = self.ring.window(boundary, self.config.segment_seconds);
        let classified = classifier.classify(&window)?;
        let admitted = if boundary < self.config.warmup_seconds {
            self.window.warm(classified);
            false
        } else {
            self.window.admit(classified)
        };
        self.next_tick += self.config.segment_seconds;
        let event = RuntimeEvent {
            clock: boundary as f64,
            classified,
            admitted,
            active: self.window.active,
        };
        self.events.push(event.clone());
        Ok(event)
    }

    /// Runs every tick the clock has passed.
    pub fn catch_up(&mut self, classifier: &dyn WindowClassifier) -> Result<(), RuntimeError> {
        while self.pending_ticks() {
            self.tick(classifier)?;
        }
        Ok(())
    }

    /// Greedy action of the active model.
    pub fn decide(&self, zoo: &ModelZoo, obs: &Observation) -> Result<usize, RuntimeError> {
        let model = zoo.resolve(self.active()).map_err(|e| match e {
            RlError::MissingEntry(l) => RuntimeError::ZooMissingEntry(l),
            other => RuntimeError::ZooMissingEntry(other.to_string()),
        })?;
        Ok(model.greedy_action(&obs.normalize())?)
    }
}

/// Zoo, classifier and confidence gate packaged as an [`AbrPolicy`].
pub struct AntPolicy<'a> {
    pub zoo: &'a ModelZoo,
    pub classifier: &'a dyn WindowClassifier,
    pub state: RuntimeState,
}

impl<'a> AntPolicy<'a> {
    pub fn new(zoo: &'a ModelZoo, classifier: &'a dyn WindowClassifier, config: RuntimeConfig) -> Result<Self, RuntimeError> {
        Ok(Self {
            zoo,
            classifier,
            state: RuntimeState::new(config)?,
        })
    }

    pub fn events(&self) -> &[RuntimeEvent] {
        &self.state.events
    }
}

impl AbrPolicy for AntPolicy<'_> {
    fn name(&self) -> String {
        "ant".into()
    }

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError> {
        Ok(self.state.decide(self.zoo, obs)?)
    }

    fn observe(&mut self, result: &ChunkResult) -> Result<(), PolicyError> {
        self.state.observe(result);
        Ok(self.state.catch_up(self.classifier)?)
    }

    fn reset(&mut self) {
        self.state = RuntimeState::new(self.state.config).expect("config validated at construction");
    }
}

pub fn runtime_log_jsonl(events: &[RuntimeEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serialises") + "\n")
        .collect()
}
