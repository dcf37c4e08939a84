//! Finite-difference checks for every layer on the tape.

mod common;

use ant_core::rng_for;
use ant_core::tensor::{BatchNorm, Conv1d, Linear, Padding, ParamStore, SeBlock, Tape, Tensor, TensorError, Var};
use common::gradcheck::{check, REL_TOL};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 99);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Values spaced at least `gap` apart, shuffled, so kinks are never crossed.
fn spaced(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = rng_for(seed, 7);
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap + 0.37 * gap).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Scalarises an output with fixed random weights so every element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let r = tape.input(random(&shape, seed));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn assert_ok(name: &str, r: common::gradcheck::CheckResult) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error <= REL_TOL, "{name}: max rel error {:e}", r.max_rel_error);
}

#[test]
fn conv1d_same_padding_all_kernels() {
    for k in [3, 5, 7] {
        let mut store = ParamStore::new();
        let mut rng = rng_for(k as u64, 1);
        let conv = Conv1d::new(&mut store, "c", 2, 3, k, Padding::Same, &mut rng);
        let x = store.add("x", random(&[2, 2, 8], 5), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = conv.forward(t, xv)?;
            project(t, y, 11)
        });
        assert_ok(&format!("conv1d k={k}"), r);
    }
}

#[test]
fn conv1d_valid_kernel_four() {
    let mut store = ParamStore::new();
    let mut rng = rng_for(4, 1);
    let conv = Conv1d::new(&mut store, "c", 1, 4, 4, Padding::Valid, &mut rng);
    let x = store.add("x", random(&[3, 1, 8], 6), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let y = conv.forward(t, xv)?;
        project(t, y, 12)
    });
    assert_ok("conv1d valid", r);
}

#[test]
fn linear_layer() {
    let mut store = ParamStore::new();
    let mut rng = rng_for(5, 1);
    let fc = Linear::new(&mut store, "fc", 6, 4, &mut rng);
    let x = store.add("x", random(&[3, 6], 8), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let y = fc.forward(t, xv)?;
        project(t, y, 13)
    });
    assert_ok("linear", r);
}

#[test]
fn batch_norm_training_mode() {
    for shape in [vec![4, 3, 5], vec![6, 4]] {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", shape[1]);
        store.get_mut(bn.gamma).data = random(&[shape[1]], 3).data.iter().map(|v| v + 1.5).collect();
        store.get_mut(bn.beta).data = random(&[shape[1]], 4).data;
        let x = store.add("x", random(&shape, 9), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = bn.forward(t, xv)?;
            project(t, y, 14)
        });
        assert_ok(&format!("batch_norm {shape:?}"), r);
    }
}

#[test]
fn se_block() {
    let mut store = ParamStore::new();
    let mut rng = rng_for(6, 1);
    let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng);
    store.get_mut(se.squeeze.bias).data = vec![0.3, -0.2];
    let x = store.add("x", random(&[2, 8, 4], 10), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let y = se.forward(t, xv)?;
        project(t, y, 15)
    });
    assert_ok("se_block", r);
}

#[test]
fn max_pool() {
    let mut store = ParamStore::new();
    let x = store.add("x", spaced(&[2, 3, 6], 0.05, 1), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let y = t.max_pool2(xv)?;
        project(t, y, 16)
    });
    assert_ok("max_pool", r);
}

#[test]
fn relu_sigmoid_softmax() {
    let mut store = ParamStore::new();
    let x = store.add("x", spaced(&[3, 5], 0.05, 2), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let a = t.relu(xv)?;
        let b = t.sigmoid(xv)?;
        let c = t.softmax(xv)?;
        let ab = t.add(a, b)?;
        let abc = t.add(ab, c)?;
        project(t, abc, 17)
    });
    assert_ok("relu/sigmoid/softmax", r);
}

#[test]
fn cross_entropy_weighted() {
    let mut store = ParamStore::new();
    let x = store.add("logits", random(&[5, 4], 3), true);
    let targets = [0, 3, 1, 1, 2];
    let weights = [0.5, 2.0, 1.0, 1.5];
    let r = check(&store, |t| {
        let xv = t.param(x);
        t.cross_entropy(xv, &targets, &weights)
    });
    assert_ok("cross_entropy", r);
}

#[test]
fn channel_shuffle_and_concat_pass_through() {
    let mut store = ParamStore::new();
    let a = store.add("a", random(&[2, 3, 4], 1), true);
    let b = store.add("b", random(&[2, 3, 4], 2), true);
    let r = check(&store, |t| {
        let (av, bv) = (t.param(a), t.param(b));
        let cat = t.concat(&[av, bv])?;
        let sh = t.channel_shuffle(cat, 3)?;
        let flat = t.flatten(sh)?;
        project(t, flat, 18)
    });
    assert_ok("concat+shuffle", r);
}

#[test]
fn dropout_with_fixed_mask() {
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[4, 6], 5), true);
    let r = check(&store, |t| {
        let xv = t.param(x);
        let y = t.dropout(xv, 0.5)?;
        project(t, y, 19)
    });
    assert_ok("dropout", r);
}

#[test]
fn actor_and_critic_losses() {
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&[2, 5], 4), true);
    let values = store.add("values", random(&[2, 1], 5), true);
    let r = check(&store, |t| {
        let lv = t.param(logits);
        t.actor_loss(lv, &[3, 0], &[1.7, -0.4], 0.5)
    });
    assert_ok("actor_loss", r);
    let r = check(&store, |t| {
        let vv = t.param(values);
        t.squared_error(vv, &[2.0, -1.0])
    });
    assert_ok("squared_error", r);
}
