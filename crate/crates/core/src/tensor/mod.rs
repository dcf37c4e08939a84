//! Dense f64 tensors with a reverse-mode tape covering the fixed layer menu
//! used by the condition classifier and the actor-critic policies.

mod adam;
mod checkpoint;
mod layers;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_params, params_from_bytes, params_to_bytes, save_params};
pub use layers::{BatchNorm, Conv1d, Linear, SeBlock};
pub use tape::{shuffle_permutation, Mode, Padding, RunningStatUpdate, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward called on a tape recorded in inference mode")]
    NoTape,
    #[error("{channels} channels cannot be split into {groups} groups")]
    IndivisibleChannels { channels: usize, groups: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("optimizer state does not match the parameter store")]
    UninitializedState,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter tensors. Trainable entries get gradient buffers in
/// [`Gradients`]; running statistics do not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Folds batch statistics from a training pass into the running averages.
    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate], momentum: f64) {
        for u in updates {
            for (r, b) in self.get_mut(u.mean).data.iter_mut().zip(&u.batch_mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.get_mut(u.var).data.iter_mut().zip(&u.batch_var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }

    /// Copies values from a store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err("copy_from", "parameter count differs"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.tensor.shape != src.tensor.shape || dst.name != src.name {
                return Err(shape_err("copy_from", format!("layout differs at {}", dst.name)));
            }
            dst.tensor.data.copy_from_slice(&src.tensor.data);
        }
        Ok(())
    }
}

/// Gradient buffers, one per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| e.trainable.then(|| vec![0.0; e.tensor.len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), TensorError> {
        if self.grads.len() != other.grads.len() {
            return Err(shape_err("gradients", "buffer count differs"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a, b) {
                (Some(a), Some(b)) if a.len() == b.len() => {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                (None, None) => {}
                _ => return Err(shape_err("gradients", "buffer layout differs")),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn running_stats_only_trainable_get_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[3]), true);
        let rm = store.add("rm", Tensor::zeros(&[3]), false);
        let g = Gradients::zeros(&store);
        assert!(g.get(w).is_some());
        assert!(g.get(rm).is_none());
        assert_eq!(store.trainable_count(), 3);
    }
}
