use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{shape_err, Gradients, ParamId, ParamStore, Tensor, TensorError};
use crate::rng_for;

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Records the graph; dropout samples masks; batch norm uses batch stats.
    Train,
    /// No gradients; dropout is identity; batch norm uses running stats.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad `(K-1)/2` per side so the length is preserved. `K` must be odd.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

enum Op {
    Input,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
    },
    ChannelShuffle {
        x: Var,
        perm: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    ActorLoss {
        logits: Var,
        actions: Vec<usize>,
        advantages: Vec<f64>,
        beta: f64,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    // Empty for parameter nodes; their values are read from the store.
    value: Tensor,
    op: Op,
}

/// Records one forward pass and replays it backwards.
pub struct Tape<'p> {
    params: &'p ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    running: Vec<RunningStatUpdate>,
}

/// Output-position -> input-channel map of a grouped channel shuffle.
///
/// Channel `g * (C / groups) + i` moves to position `i * groups + g`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>, TensorError> {
    if groups == 0 || channels % groups != 0 {
        return Err(TensorError::IndivisibleChannels { channels, groups });
    }
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for g in 0..groups {
        for i in 0..per {
            perm[i * groups + g] = g * per + i;
        }
    }
    Ok(perm)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            params,
            mode,
            nodes: Vec::new(),
            rng: rng_for(seed, 0xd20),
            running: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Batch statistics gathered by training-mode batch norms, in call order.
    pub fn running_stat_updates(&self) -> &[RunningStatUpdate] {
        &self.running
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::zeros(&[0]), Op::Param(id))
    }

    /// Cross-correlation over `[N, C_in, L]` with kernel `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d", format!("input {xs:?} kernel {ws:?}")));
        }
        let (n, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let pad = match padding {
            Padding::Same if k % 2 == 1 => (k - 1) / 2,
            Padding::Same => return Err(shape_err("conv1d", format!("same padding needs an odd kernel, got {k}"))),
            Padding::Valid => 0,
        };
        if len + 2 * pad < k {
            return Err(shape_err("conv1d", format!("input length {len} shorter than kernel {k}")));
        }
        let lout = len + 2 * pad - k + 1;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d", format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let mut out = vec![0.0; n * cout * lout];
        for ni in 0..n {
            for co in 0..cout {
                let o = &mut out[(ni * cout + co) * lout..][..lout];
                if let Some(b) = b {
                    let bv = self.value(b).data[co];
                    o.iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..cin {
                    let xr = &xd[(ni * cin + ci) * len..][..len];
                    let wr = &wd[(co * cin + ci) * k..][..k];
                    for (kk, &wv) in wr.iter().enumerate() {
                        // Output l reads input l + kk - pad.
                        let lo = pad.saturating_sub(kk);
                        let hi = lout.min(len + pad - kk);
                        if lo >= hi {
                            continue;
                        }
                        let off = lo + kk - pad;
                        for (ov, xv) in o[lo..hi].iter_mut().zip(&xr[off..off + (hi - lo)]) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, cout, lout], out)?;
        self.push_checked("conv1d", t, Op::Conv1d { x, w, b, pad })
    }

    /// `x [N, F] · wᵀ + b` with `w [O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?} weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("linear", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let mut out = vec![0.0; n * o];
        for ni in 0..n {
            let xr = &xd[ni * f..][..f];
            for oi in 0..o {
                let wr = &wd[oi * f..][..f];
                let mut acc = b.map_or(0.0, |b| self.value(b).data[oi]);
                for (a, c) in wr.iter().zip(xr) {
                    acc += a * c;
                }
                out[ni * o + oi] = acc;
            }
        }
        let t = Tensor::new(vec![n, o], out)?;
        self.push_checked("linear", t, Op::Linear { x, w, b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape.clone(), data)?;
        self.push_checked("add", t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape.clone(), data)?;
        self.push_checked("mul", t, Op::Mul(a, b))
    }

    /// `x [N, C, L] * gate [N, C]` broadcast along `L`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var, TensorError> {
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        if xs.len() != 3 || gs != [xs[0], xs[1]] {
            return Err(shape_err("scale_channels", format!("input {xs:?} gate {gs:?}")));
        }
        let len = xs[2];
        let gd = &self.value(gate).data;
        let data = self
            .value(x)
            .data
            .chunks_exact(len)
            .zip(gd)
            .flat_map(|(row, g)| row.iter().map(move |v| v * g))
            .collect();
        let t = Tensor::new(xs, data)?;
        self.push_checked("scale_channels", t, Op::ScaleChannels { x, gate })
    }

    /// Mean over the length axis: `[N, C, L] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(shape_err("global_avg_pool", format!("input {xs:?}")));
        }
        let len = xs[2] as f64;
        let data = self
            .value(x)
            .data
            .chunks_exact(xs[2])
            .map(|r| r.iter().sum::<f64>() / len)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.push_checked("global_avg_pool", t, Op::GlobalAvgPool(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x.max(0.0)).collect())?;
        self.push_checked("relu", t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let data = v.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::new(v.shape.clone(), data)?;
        self.push_checked("sigmoid", t, Op::Sigmoid(x))
    }

    /// Concatenates along axis 1. All parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", format!("rank {} input", first.len())));
        }
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let n = first[0];
        let mut data = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape[1] * inner;
                data.extend_from_slice(&v.data[ni * block..(ni + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        self.push_checked("concat", t, Op::Concat { parts: parts.to_vec() })
    }

    /// Grouped channel shuffle on axis 1.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("channel_shuffle", format!("input {xs:?}")));
        }
        let perm = shuffle_permutation(xs[1], groups)?;
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        for ni in 0..xs[0] {
            for (dst_c, &src_c) in perm.iter().enumerate() {
                let d = (ni * c + dst_c) * inner;
                let s = (ni * c + src_c) * inner;
                data[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let t = Tensor::new(xs, data)?;
        self.push_checked("channel_shuffle", t, Op::ChannelShuffle { x, perm })
    }

    /// Batch norm over axis 1 of `[N, C]` or `[N, C, L]`.
    ///
    /// Training mode normalises with batch statistics and records them for
    /// [`ParamStore::apply_running_stats`]; inference uses the running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if !(xs.len() == 2 || xs.len() == 3) {
            return Err(shape_err("batch_norm", format!("input {xs:?}")));
        }
        let c = xs[1];
        let inner = if xs.len() == 3 { xs[2] } else { 1 };
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(shape_err("batch_norm", format!("affine {:?} for {c} channels", self.shape(v))));
            }
        }
        if self.params.get(running_mean).shape != [c] || self.params.get(running_var).shape != [c] {
            return Err(shape_err("batch_norm", "running statistics shape"));
        }
        let n = xs[0];
        let m = (n * inner) as f64;
        let xd = &self.value(x).data;
        let idx = |ni: usize, ci: usize| (ni * c + ci) * inner;
        let (mean, var, batch_stats) = if self.mode == Mode::Train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xd[idx(ni, ci)..][..inner].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut q = 0.0;
                for ni in 0..n {
                    q += xd[idx(ni, ci)..][..inner]
                        .iter()
                        .map(|v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<f64>();
                }
                var[ci] = q / m;
            }
            (mean, var, true)
        } else {
            (
                self.params.get(running_mean).data.clone(),
                self.params.get(running_var).data.clone(),
                false,
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = idx(ni, ci);
                for j in base..base + inner {
                    let h = (xd[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = gd[ci] * h + bd[ci];
                }
            }
        }
        if batch_stats {
            self.running.push(RunningStatUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let t = Tensor::new(xs, out)?;
        self.push_checked(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Max pool, window 2, stride 1, padded on the right so length is kept.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(shape_err("max_pool", format!("input {xs:?}")));
        }
        let len = xs[2];
        let xd = &self.value(x).data;
        let mut out = vec![0.0; xd.len()];
        let mut argmax = vec![0; xd.len()];
        for (r, row) in xd.chunks_exact(len).enumerate() {
            for l in 0..len {
                let mut best = l;
                if l + 1 < len && row[l + 1] > row[l] {
                    best = l + 1;
                }
                out[r * len + l] = row[best];
                argmax[r * len + l] = r * len + best;
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push_checked("max_pool", t, Op::MaxPool { x, argmax })
    }

    /// Inverted dropout; identity in inference mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        let v = self.value(x);
        let shape = v.shape.clone();
        let n = v.len();
        let mask: Vec<f64> = if self.mode == Mode::Train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let data = self.value(x).data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(shape, data)?;
        self.push_checked("dropout", t, Op::Dropout { x, mask })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x);
        let t = Tensor::new(shape.to_vec(), v.data.clone())
            .map_err(|_| shape_err("reshape", format!("{:?} -> {shape:?}", v.shape)))?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Row-wise softmax of `[N, K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax", format!("input {s:?}")));
        }
        let data = softmax_rows(&self.value(x).data, s[1]);
        let t = Tensor::new(s, data)?;
        self.push_checked("softmax", t, Op::Softmax(x))
    }

    /// Class-weighted mean cross-entropy of softmax(logits) against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || class_weights.len() != s[1] {
            return Err(shape_err("cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(shape_err("cross_entropy", format!("target {t} out of {} classes", s[1])));
        }
        let k = s[1];
        let ld = &self.value(logits).data;
        let probs = softmax_rows(ld, k);
        let weights: Vec<f64> = targets.iter().map(|&t| class_weights[t]).collect();
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (i, (&t, w)) in targets.iter().zip(&weights).enumerate() {
            loss -= w * log_softmax_row(&ld[i * k..(i + 1) * k])[t];
        }
        let t = Tensor::scalar(loss / total);
        self.push_checked(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.into_iter().map(|w| w / total).collect(),
                probs,
            },
        )
    }

    /// `-Σ A_t log π(a_t|s_t) - β Σ H(π(·|s_t))` with advantages held constant.
    pub fn actor_loss(&mut self, logits: Var, actions: &[usize], advantages: &[f64], beta: f64) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != actions.len() || s[0] != advantages.len() {
            return Err(shape_err(
                "actor_loss",
                format!("logits {s:?}, {} actions, {} advantages", actions.len(), advantages.len()),
            ));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= s[1]) {
            return Err(shape_err("actor_loss", format!("action {a} out of {} choices", s[1])));
        }
        let k = s[1];
        let ld = &self.value(logits).data;
        let probs = softmax_rows(ld, k);
        let mut loss = 0.0;
        for (i, (&a, adv)) in actions.iter().zip(advantages).enumerate() {
            let lp = log_softmax_row(&ld[i * k..(i + 1) * k]);
            let entropy: f64 = -probs[i * k..(i + 1) * k].iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
            loss += -adv * lp[a] - beta * entropy;
        }
        let t = Tensor::scalar(loss);
        self.push_checked(
            "actor_loss",
            t,
            Op::ActorLoss {
                logits,
                actions: actions.to_vec(),
                advantages: advantages.to_vec(),
                beta,
                probs,
            },
        )
    }

    /// `Σ (target - pred)²` over every element of `pred`.
    pub fn squared_error(&mut self, pred: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.len() != targets.len() {
            return Err(shape_err("squared_error", format!("{} predictions, {} targets", p.len(), targets.len())));
        }
        let loss = p.data.iter().zip(targets).map(|(a, b)| (b - a) * (b - a)).sum();
        self.push_checked(
            "squared_error",
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse-mode accumulation from a scalar into `grads`. Repeated calls
    /// add up; zero `grads` between steps.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), TensorError> {
        if self.mode != Mode::Train {
            return Err(TensorError::NoTape);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        if grads.len() != self.params.len() {
            return Err(TensorError::UninitializedState);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => {
                    if let Some(buf) = grads.get_mut(*id) {
                        buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v);
                    }
                }
                Op::Conv1d { x, w, b, pad } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, cin, len) = (xs[0], xs[1], xs[2]);
                    let (cout, k) = (ws[0], ws[2]);
                    let lout = len + 2 * pad - k + 1;
                    let xd = &self.value(*x).data;
                    let wd = &self.value(*w).data;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wd.len()];
                    for ni in 0..n {
                        for co in 0..cout {
                            let go = &g[(ni * cout + co) * lout..][..lout];
                            for ci in 0..cin {
                                let xbase = (ni * cin + ci) * len;
                                let wbase = (co * cin + ci) * k;
                                for kk in 0..k {
                                    let lo = pad.saturating_sub(kk);
                                    let hi = lout.min(len + pad - kk);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let off = xbase + lo + kk - pad;
                                    let wv = wd[wbase + kk];
                                    let mut acc = 0.0;
                                    for (j, gv) in go[lo..hi].iter().enumerate() {
                                        acc += gv * xd[off + j];
                                        dx[off + j] += wv * gv;
                                    }
                                    dw[wbase + kk] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; cout];
                        for (r, row) in g.chunks_exact(lout).enumerate() {
                            db[r % cout] += row.iter().sum::<f64>();
                        }
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, f, o) = (xs[0], xs[1], ws[0]);
                    let xd = &self.value(*x).data;
                    let wd = &self.value(*w).data;
                    let mut dx = vec![0.0; n * f];
                    let mut dw = vec![0.0; o * f];
                    for ni in 0..n {
                        let xr = &xd[ni * f..][..f];
                        let dxr = &mut dx[ni * f..][..f];
                        for oi in 0..o {
                            let gv = g[ni * o + oi];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &wd[oi * f..][..f];
                            for (d, wv) in dxr.iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                            for (d, xv) in dw[oi * f..][..f].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; o];
                        for row in g.chunks_exact(o) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    accumulate(&mut adj, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    accumulate(&mut adj, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                Op::ScaleChannels { x, gate } => {
                    let len = self.shape(*x)[2];
                    let xd = &self.value(*x).data;
                    let gd = &self.value(*gate).data;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dg = vec![0.0; gd.len()];
                    for (r, gate_v) in gd.iter().enumerate() {
                        let base = r * len;
                        for j in base..base + len {
                            dx[j] = g[j] * gate_v;
                            dg[r] += g[j] * xd[j];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gate, dg);
                }
                Op::GlobalAvgPool(x) => {
                    let len = self.shape(*x)[2];
                    let inv = 1.0 / len as f64;
                    let dx = g.iter().flat_map(|v| std::iter::repeat_n(v * inv, len)).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Relu(x) => {
                    let xd = &self.value(*x).data;
                    let dx = g.iter().zip(xd).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value.data;
                    let dx = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Concat { parts } => {
                    let shape = &self.nodes[i].value.shape;
                    let inner: usize = shape[2..].iter().product();
                    let total = shape[1] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let block = self.shape(*p)[1] * inner;
                        let mut dp = Vec::with_capacity(block * shape[0]);
                        for ni in 0..shape[0] {
                            dp.extend_from_slice(&g[ni * total + offset..][..block]);
                        }
                        accumulate(&mut adj, *p, dp);
                        offset += block;
                    }
                }
                Op::ChannelShuffle { x, perm } => {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..shape[0] {
                        for (dst_c, &src_c) in perm.iter().enumerate() {
                            let d = (ni * c + dst_c) * inner;
                            let s = (ni * c + src_c) * inner;
                            dx[s..s + inner].copy_from_slice(&g[d..d + inner]);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = self.shape(*x);
                    let (n, c) = (shape[0], shape[1]);
                    let inner = if shape.len() == 3 { shape[2] } else { 1 };
                    let m = (n * inner) as f64;
                    let gd = &self.value(*gamma).data;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    for ci in 0..c {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for ni in 0..n {
                            let base = (ni * c + ci) * inner;
                            for j in base..base + inner {
                                dgamma[ci] += g[j] * xhat[j];
                                dbeta[ci] += g[j];
                                let dh = g[j] * gd[ci];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[j];
                            }
                        }
                        for ni in 0..n {
                            let base = (ni * c + ci) * inner;
                            for j in base..base + inner {
                                let dh = g[j] * gd[ci];
                                dx[j] = if *batch_stats {
                                    inv_std[ci] * (dh - sum_dh / m - xhat[j] * sum_dh_h / m)
                                } else {
                                    inv_std[ci] * dh
                                };
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; g.len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut adj, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::Reshape(x) => accumulate(&mut adj, *x, g),
                Op::Softmax(x) => {
                    let y = &self.nodes[i].value;
                    let k = y.shape[1];
                    let mut dx = vec![0.0; g.len()];
                    for ((yr, gr), dr) in y.data.chunks_exact(k).zip(g.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let k = self.shape(*logits)[1];
                    let mut dx = vec![0.0; probs.len()];
                    for (r, (&t, w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx[r * k + j] = g[0] * w * (probs[r * k + j] - onehot);
                        }
                    }
                    accumulate(&mut adj, *logits, dx);
                }
                Op::ActorLoss {
                    logits,
                    actions,
                    advantages,
                    beta,
                    probs,
                } => {
                    let k = self.shape(*logits)[1];
                    let mut dx = vec![0.0; probs.len()];
                    for (r, (&a, adv)) in actions.iter().zip(advantages).enumerate() {
                        let p = &probs[r * k..(r + 1) * k];
                        let lp: Vec<f64> = p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
                        let h: f64 = -p.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..k {
                            let onehot = if j == a { 1.0 } else { 0.0 };
                            // d(-A log p_a) + d(-βH), with dH/dz_j = -p_j (log p_j + H).
                            let pg = -adv * (onehot - p[j]);
                            let ent = beta * p[j] * (lp[j] + h);
                            dx[r * k + j] = g[0] * (pg + ent);
                        }
                    }
                    accumulate(&mut adj, *logits, dx);
                }
                Op::SquaredError { pred, targets } => {
                    let pd = &self.value(*pred).data;
                    let dx = pd.iter().zip(targets).map(|(p, t)| g[0] * 2.0 * (p - t)).collect();
                    accumulate(&mut adj, *pred, dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut adj, *x, vec![g[0]; n]);
                }
            }
        }
        if !grads.is_finite() {
            return Err(TensorError::NonFinite("backward"));
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_shift() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let x = tape.input(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let id = tape.input(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d(x, id, None, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0]);
        let shift = tape.input(t(&[1, 1, 3], &[0.0, 0.0, 1.0]));
        let y = tape.conv1d(x, shift, None, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data, vec![2.0, 3.0, 0.0]);
        let even = tape.input(t(&[1, 1, 2], &[1.0, 1.0]));
        assert!(matches!(
            tape.conv1d(x, even, None, Padding::Same),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let valid = tape.conv1d(x, even, None, Padding::Valid).unwrap();
        assert_eq!(tape.value(valid).data, vec![3.0, 5.0]);
    }

    #[test]
    fn shuffle_permutation_matches_definition() {
        assert_eq!(shuffle_permutation(6, 3).unwrap(), vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(shuffle_permutation(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            shuffle_permutation(7, 3),
            Err(TensorError::IndivisibleChannels { channels: 7, groups: 3 })
        ));
        let perm = shuffle_permutation(12, 3).unwrap();
        let mut inverse = vec![0; 12];
        for (dst, &src) in perm.iter().enumerate() {
            inverse[src] = dst;
        }
        let roundtrip: Vec<usize> = (0..12).map(|c| perm[inverse[c]]).collect();
        assert_eq!(roundtrip, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_moves_channels() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let x = tape.input(t(&[1, 6, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = tape.channel_shuffle(x, 3).unwrap();
        assert_eq!(tape.value(y).data, vec![0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn residual_add_gradients_pass_through() {
        let mut s = store();
        let a = s.add("a", t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = s.add("b", t(&[3], &[-1.0, -2.0, -3.0]), true);
        let mut tape = Tape::new(&s, Mode::Train, 0);
        let (va, vb) = (tape.param(a), tape.param(b));
        let sum = tape.add(va, vb).unwrap();
        assert_eq!(tape.value(sum).data, vec![0.0; 3]);
        let w = tape.input(t(&[3], &[5.0, 6.0, 7.0]));
        let prod = tape.mul(sum, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let mut g = Gradients::zeros(&s);
        tape.backward(loss, &mut g).unwrap();
        assert_eq!(g.get(a).unwrap(), &[5.0, 6.0, 7.0]);
        assert_eq!(g.get(b).unwrap(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn linear_grad_is_input_and_accumulates() {
        let mut s = store();
        let w = s.add("w", t(&[1, 3], &[0.3, -0.2, 0.7]), true);
        let mut tape = Tape::new(&s, Mode::Train, 0);
        let x = tape.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let wv = tape.param(w);
        let y = tape.linear(x, wv, None).unwrap();
        let loss = tape.sum(y).unwrap();
        let mut g = Gradients::zeros(&s);
        tape.backward(loss, &mut g).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0, 3.0]);
        tape.backward(loss, &mut g).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut s = store();
        let w = s.add("w", t(&[1], &[1.0]), true);
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let v = tape.param(w);
        let loss = tape.sum(v).unwrap();
        let mut g = Gradients::zeros(&s);
        assert_eq!(tape.backward(loss, &mut g), Err(TensorError::NoTape));
    }

    #[test]
    fn softmax_uniform_and_simplex() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let x = tape.input(Tensor::zeros(&[1, 5]));
        let y = tape.softmax(x).unwrap();
        for p in &tape.value(y).data {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let z = tape.input(t(&[2, 3], &[1000.0, -3.0, 2.5, 0.1, 0.2, 0.3]));
        let y = tape.softmax(z).unwrap();
        for row in tape.value(y).data.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_zero_variance_outputs_shift() {
        let mut s = store();
        let gamma = s.add("g", t(&[2], &[1.5, 2.0]), true);
        let beta = s.add("b", t(&[2], &[0.25, -1.0]), true);
        let rm = s.add("rm", Tensor::zeros(&[2]), false);
        let rv = s.add("rv", Tensor::filled(&[2], 1.0), false);
        let mut tape = Tape::new(&s, Mode::Train, 0);
        let x = tape.input(Tensor::filled(&[3, 2, 4], 7.0));
        let (g, b) = (tape.param(gamma), tape.param(beta));
        let y = tape.batch_norm(x, g, b, rm, rv).unwrap();
        for (i, v) in tape.value(y).data.iter().enumerate() {
            let c = (i / 4) % 2;
            assert_eq!(*v, [0.25, -1.0][c]);
        }
        let updates = tape.running_stat_updates().to_vec();
        drop(tape);
        s.apply_running_stats(&updates, 0.9);
        assert!((s.get(rm).data[0] - 0.7).abs() < 1e-12);
        assert!((s.get(rv).data[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dropout_behaviour() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Train, 3);
        let x = tape.input(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.dropout(x, 1.0), Err(TensorError::InvalidProbability(1.0)));
        assert!(tape.dropout(x, -0.1).is_err());
        let mut infer = Tape::new(&s, Mode::Infer, 3);
        let xi = infer.input(t(&[1, 2], &[1.0, 2.0]));
        let yi = infer.dropout(xi, 0.5).unwrap();
        assert_eq!(infer.value(yi).data, vec![1.0, 2.0]);
    }

    #[test]
    fn max_pool_keeps_width() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let x = tape.input(t(&[1, 1, 4], &[1.0, 3.0, 2.0, 0.5]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data, vec![3.0, 3.0, 2.0, 0.5]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let s = store();
        let mut tape = Tape::new(&s, Mode::Infer, 0);
        let x = tape.input(t(&[1, 2], &[f64::MAX, f64::MAX]));
        assert_eq!(tape.add(x, x), Err(TensorError::NonFinite("add")));
    }
}
