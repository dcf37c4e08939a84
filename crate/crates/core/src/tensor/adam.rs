use super::{Gradients, ParamStore, TensorError};

/// Adam with bias correction. Moments are kept for trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let moments: Vec<Option<Vec<f64>>> = store
            .ids()
            .map(|id| store.is_trainable(id).then(|| vec![0.0; store.get(id).len()]))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: moments.clone(),
            first: moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<(), TensorError> {
        if self.first.len() != store.len() || grads.len() != store.len() {
            return Err(TensorError::UninitializedState);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let (Some(m), Some(v)) = (&mut self.first[id.0], &mut self.second[id.0]) else {
                continue;
            };
            let g = grads.get(id).ok_or(TensorError::UninitializedState)?;
            let p = &mut store.get_mut(id).data;
            if m.len() != p.len() || g.len() != p.len() {
                return Err(TensorError::UninitializedState);
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        grads.zero();
        Ok(())
    }
}
