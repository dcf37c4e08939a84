//! Central finite-difference gradient oracle. Independent of the tape's
//! backward pass: it only ever evaluates forward losses.

use ant_core::tensor::{Gradients, Mode, ParamStore, Tape, TensorError, Var};

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
const TAPE_SEED: u64 = 17;

pub fn eval_loss<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new(store, Mode::Train, TAPE_SEED);
    let loss = build(&mut tape).expect("forward");
    tape.value(loss).data[0]
}

#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of every trainable scalar against
/// `(L(p + ε) - L(p - ε)) / 2ε`, returning the worst relative error
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn check<F>(store: &ParamStore, build: F) -> CheckResult
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let mut grads = Gradients::zeros(store);
    {
        let mut tape = Tape::new(store, Mode::Train, TAPE_SEED);
        let loss = build(&mut tape).expect("forward");
        tape.backward(loss, &mut grads).expect("backward");
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data[i];
            probe.get_mut(id).data[i] = orig + EPS;
            let up = eval_loss(&probe, &build);
            probe.get_mut(id).data[i] = orig - EPS;
            let down = eval_loss(&probe, &build);
            probe.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(id).unwrap()[i];
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    CheckResult {
        max_rel_error: worst,
        checked,
    }
}
