//! Parameterised layers: each owns `ParamId`s in a [`ParamStore`] and knows
//! how to emit itself onto a [`Tape`].

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::tensor::Padding;

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = glorot(in_channels * kernel, out_channels * kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_channels, in_channels, kernel], bound, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv1d(x, w, Some(b), self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_bound(store, name, inputs, outputs, glorot(inputs, outputs), rng)
    }

    /// Like [`Linear::new`] with an explicit init bound, e.g. a small output head.
    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[outputs, inputs], bound, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batch_norm(x, g, b, self.running_mean, self.running_var)
    }
}

/// Squeeze-and-excitation gate: global average pool, bottleneck FC with
/// ReLU, expanding FC with sigmoid, then channel-wise rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / ratio.max(1)).max(1);
        Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng),
            excite: Linear::new(store, &format!("{name}.excite"), hidden, channels, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let pooled = tape.global_avg_pool(x)?;
        let h = self.squeeze.forward(tape, pooled)?;
        let h = tape.relu(h)?;
        let e = self.excite.forward(tape, h)?;
        let gate = tape.sigmoid(e)?;
        tape.scale_channels(x, gate)
    }
}
