use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AbrPolicy, NormalizedObservation, Observation, PolicyError, HISTORY};
use crate::rng_for;
use crate::tensor::{
    params_from_bytes, params_to_bytes, Conv1d, Linear, Mode, Padding, ParamStore, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Layer sizes shared by the actor and the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub actions: usize,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            actions: 5,
            channels: 128,
            hidden: 128,
            kernel: 4,
        }
    }
}

impl PolicyArch {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidArch(m));
        if self.actions < 2 || self.channels == 0 || self.hidden == 0 || self.kernel == 0 {
            return bad(format!("{self:?}"));
        }
        if self.kernel > HISTORY || self.kernel > self.actions {
            return bad(format!("kernel {} longer than an input sequence", self.kernel));
        }
        Ok(())
    }

    fn merged_width(&self) -> usize {
        let hist = HISTORY - self.kernel + 1;
        let sizes = self.actions - self.kernel + 1;
        self.channels * (2 * hist + sizes + 3)
    }
}

/// Observations packed as network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    pub throughput: Tensor,
    pub download: Tensor,
    pub sizes: Tensor,
    pub buffer: Tensor,
    pub last_bitrate: Tensor,
    pub remaining: Tensor,
}

impl PolicyBatch {
    pub fn new(obs: &[NormalizedObservation], actions: usize) -> Result<Self, PolicyError> {
        let n = obs.len();
        if let Some(o) = obs.iter().find(|o| o.sizes.len() != actions) {
            return Err(PolicyError::ShapeMismatch(format!(
                "{} chunk sizes for {actions} actions",
                o.sizes.len()
            )));
        }
        let seq = |f: &dyn Fn(&NormalizedObservation) -> &[f64], len: usize| {
            Tensor::new(vec![n, 1, len], obs.iter().flat_map(|o| f(o).to_vec()).collect())
        };
        let col = |f: &dyn Fn(&NormalizedObservation) -> f64| Tensor::new(vec![n, 1], obs.iter().map(f).collect());
        Ok(Self {
            throughput: seq(&|o| &o.throughput, HISTORY)?,
            download: seq(&|o| &o.download, HISTORY)?,
            sizes: seq(&|o| &o.sizes, actions)?,
            buffer: col(&|o| o.buffer)?,
            last_bitrate: col(&|o| o.last_bitrate)?,
            remaining: col(&|o| o.remaining)?,
        })
    }

    pub fn len(&self) -> usize {
        self.buffer.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One branch (actor or critic): a kernel-4 conv over each sequence, a
/// dense projection of each scalar, a merged hidden layer and a head.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub store: ParamStore,
    conv_throughput: Conv1d,
    conv_download: Conv1d,
    conv_sizes: Conv1d,
    fc_buffer: Linear,
    fc_last: Linear,
    fc_remaining: Linear,
    fc_hidden: Linear,
    head: Linear,
}

impl PolicyNet {
    fn new(arch: &PolicyArch, outputs: usize, head_bound: f64, rng: &mut impl Rng) -> Self {
        let mut s = ParamStore::new();
        let c = arch.channels;
        let conv = |s: &mut ParamStore, name: &str, rng: &mut _| Conv1d::new(s, name, 1, c, arch.kernel, Padding::Valid, rng);
        let conv_throughput = conv(&mut s, "conv_throughput", rng);
        let conv_download = conv(&mut s, "conv_download", rng);
        let conv_sizes = conv(&mut s, "conv_sizes", rng);
        let fc_buffer = Linear::new(&mut s, "fc_buffer", 1, c, rng);
        let fc_last = Linear::new(&mut s, "fc_last", 1, c, rng);
        let fc_remaining = Linear::new(&mut s, "fc_remaining", 1, c, rng);
        let fc_hidden = Linear::new(&mut s, "fc_hidden", arch.merged_width(), arch.hidden, rng);
        let head = Linear::with_bound(&mut s, "head", arch.hidden, outputs, head_bound, rng);
        Self {
            store: s,
            conv_throughput,
            conv_download,
            conv_sizes,
            fc_buffer,
            fc_last,
            fc_remaining,
            fc_hidden,
            head,
        }
    }

    /// Emits the branch on `tape` (which must be built over `self.store`)
    /// and returns the head output `[N, outputs]`.
    pub fn forward(&self, tape: &mut Tape, batch: &PolicyBatch) -> Result<Var, PolicyError> {
        let mut parts = Vec::with_capacity(6);
        for (layer, input) in [
            (&self.conv_throughput, &batch.throughput),
            (&self.conv_download, &batch.download),
            (&self.conv_sizes, &batch.sizes),
        ] {
            let x = tape.input(input.clone());
            let h = layer.forward(tape, x)?;
            let h = tape.relu(h)?;
            parts.push(tape.flatten(h)?);
        }
        for (layer, input) in [
            (&self.fc_buffer, &batch.buffer),
            (&self.fc_last, &batch.last_bitrate),
            (&self.fc_remaining, &batch.remaining),
        ] {
            let x = tape.input(input.clone());
            let h = layer.forward(tape, x)?;
            parts.push(tape.relu(h)?);
        }
        let merged = tape.concat(&parts)?;
        let h = self.fc_hidden.forward(tape, merged)?;
        let h = tape.relu(h)?;
        Ok(self.head.forward(tape, h)?)
    }

    fn infer(&self, batch: &PolicyBatch) -> Result<Tensor, PolicyError> {
        let mut tape = Tape::new(&self.store, Mode::Infer, 0);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

/// Actor and critic for one network condition.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    pub actor: PolicyNet,
    pub critic: PolicyNet,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    arch: PolicyArch,
    actor: String,
    critic: String,
}

impl PolicyModel {
    pub fn new(arch: PolicyArch, seed: u64) -> Result<Self, PolicyError> {
        arch.validate()?;
        let mut rng = rng_for(seed, 0xac);
        let actor = PolicyNet::new(&arch, arch.actions, 0.01, &mut rng);
        let critic = PolicyNet::new(&arch, 1, 0.01, &mut rng);
        Ok(Self { arch, actor, critic })
    }

    pub fn batch(&self, obs: &[NormalizedObservation]) -> Result<PolicyBatch, PolicyError> {
        PolicyBatch::new(obs, self.arch.actions)
    }

    /// Action distributions, one row per observation.
    pub fn actor_probs_batch(&self, obs: &[NormalizedObservation]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let logits = self.actor.infer(&self.batch(obs)?)?;
        let mut tape = Tape::new(&self.actor.store, Mode::Infer, 0);
        let x = tape.input(logits);
        let p = tape.softmax(x)?;
        Ok(tape.value(p).data.chunks(self.arch.actions).map(<[f64]>::to_vec).collect())
    }

    pub fn actor_forward(&self, obs: &NormalizedObservation) -> Result<Vec<f64>, PolicyError> {
        Ok(self.actor_probs_batch(std::slice::from_ref(obs))?.remove(0))
    }

    pub fn critic_values(&self, obs: &[NormalizedObservation]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.critic.infer(&self.batch(obs)?)?.data)
    }

    pub fn critic_forward(&self, obs: &NormalizedObservation) -> Result<f64, PolicyError> {
        Ok(self.critic_values(std::slice::from_ref(obs))?[0])
    }

    pub fn greedy_action(&self, obs: &NormalizedObservation) -> Result<usize, PolicyError> {
        Ok(argmax(&self.actor_forward(obs)?))
    }

    /// Draws from the actor's distribution by inverse CDF.
    pub fn sample_action(&self, obs: &NormalizedObservation, rng: &mut impl Rng) -> Result<usize, PolicyError> {
        let probs = self.actor_forward(obs)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(probs.len() - 1)
    }

    fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(format!("{stem}.json")),
            dir.join(format!("{stem}.actor.bin")),
            dir.join(format!("{stem}.critic.bin")),
        )
    }

    /// Writes `<stem>.json`, `<stem>.actor.bin` and `<stem>.critic.bin`;
    /// returns the path of the JSON sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let (meta, actor, critic) = Self::paths(dir, stem);
        let sidecar = Sidecar {
            arch: self.arch,
            actor: file_name(&actor),
            critic: file_name(&critic),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&meta, e))?;
        fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
        fs::write(&actor, params_to_bytes(&self.actor.store)).map_err(|e| Error::io(&actor, e))?;
        fs::write(&critic, params_to_bytes(&self.critic.store)).map_err(|e| Error::io(&critic, e))?;
        Ok(meta)
    }

    /// Loads a model from the JSON sidecar written by [`PolicyModel::save`].
    pub fn load(meta: impl AsRef<Path>) -> Result<Self> {
        let meta = meta.as_ref();
        let text = fs::read_to_string(meta).map_err(|e| Error::io(meta, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(meta, e))?;
        let mut model = Self::new(sidecar.arch, 0)?;
        let dir = meta.parent().unwrap_or(Path::new("."));
        for (net, name) in [(&mut model.actor, &sidecar.actor), (&mut model.critic, &sidecar.critic)] {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            net.store.copy_from(&params_from_bytes(&bytes)?)?;
        }
        Ok(model)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().expect("file path").to_string_lossy().into_owned()
}

/// Greedy evaluation wrapper around a [`PolicyModel`].
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub model: &'a PolicyModel,
    pub label: &'a str,
}

impl AbrPolicy for GreedyPolicy<'_> {
    fn name(&self) -> String {
        self.label.to_string()
    }

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError> {
        self.model.greedy_action(&obs.normalize())
    }
}
