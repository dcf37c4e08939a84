//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is printed in
//! full by `cargo test`. A failing criterion is reported, not hidden; set
//! `ACCEPTANCE_STRICT=1` to turn any failure into a nonzero exit status.

mod common;

use std::cell::Cell;
use std::path::Path;
use std::time::Instant;

use ant_core::abr::{AbrPolicy, FixedPolicy, GreedyPolicy, Observation, PolicyArch, PolicyError};
use ant_core::cluster::{fit_points, segment_trace, sweep_k, ConditionLabel, KMeansConfig, Segment};
use ant_core::condition::TrainReport;
use ant_core::eval::{self, corpus_manifest, snapshot_dir, ExperimentConfig};
use ant_core::rl::{train_model, TrainConfig};
use ant_core::runtime::{RuntimeConfig, RuntimeError, RuntimeState, WindowClassifier};
use ant_core::sim::{generate_manifest, ChunkResult, SimState, Simulator, DEFAULT_LADDER_KBPS};
use ant_core::tensor::{BatchNorm, Conv1d, Linear, Padding, ParamStore, SeBlock, Tape, Tensor, TensorError, Var};
use ant_core::trace::{resample_1hz, ResampledTrace};
use ant_core::rng_for;
use common::gradcheck::{check, REL_TOL};
use common::oracles::{confidence_reference, exhaustive_partition_sse, zscore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn timed(id: usize, name: &'static str, limit_s: f64, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < limit_s;
    Outcome {
        id,
        name,
        pass: ok && in_time,
        detail: if in_time {
            detail
        } else {
            format!("{detail}; exceeded {limit_s:.0} s")
        },
        secs,
    }
}

// ---------------------------------------------------------------- 1

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng_for(seed, 99))
}

fn spaced(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = rng_for(seed, 7);
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap + 0.37 * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let r = tape.input(random(&shape, seed));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn gradient_checks() -> (bool, String) {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for k in [3, 5, 7] {
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 3, k, Padding::Same, &mut rng_for(k as u64, 1));
        let x = store.add("x", random(&[2, 2, 8], 5), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = conv.forward(t, xv)?;
            project(t, y, 11)
        });
        worst.push((format!("conv{k}"), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng_for(6, 1));
        store.get_mut(se.squeeze.bias).data = vec![0.3, -0.2];
        let x = store.add("x", random(&[2, 8, 4], 10), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = se.forward(t, xv)?;
            project(t, y, 15)
        });
        worst.push(("se".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.get_mut(bn.gamma).data = vec![1.2, 0.7, 1.9];
        let x = store.add("x", random(&[4, 3, 5], 9), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = bn.forward(t, xv)?;
            project(t, y, 14)
        });
        worst.push(("batchnorm".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("x", spaced(&[2, 3, 6], 0.05, 1), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = t.max_pool2(xv)?;
            project(t, y, 16)
        });
        worst.push(("maxpool".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, "fc", 6, 4, &mut rng_for(5, 1));
        let x = store.add("x", random(&[3, 6], 8), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            let y = fc.forward(t, xv)?;
            project(t, y, 13)
        });
        worst.push(("fc".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let x = store.add("logits", random(&[5, 4], 3), true);
        let r = check(&store, |t| {
            let xv = t.param(x);
            t.cross_entropy(xv, &[0, 3, 1, 1, 2], &[0.5, 2.0, 1.0, 1.5])
        });
        worst.push(("softmax+xent".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[2, 3, 4], 1), true);
        let b = store.add("b", random(&[2, 3, 4], 2), true);
        let r = check(&store, |t| {
            let (av, bv) = (t.param(a), t.param(b));
            let cat = t.concat(&[av, bv])?;
            let sh = t.channel_shuffle(cat, 3)?;
            project(t, sh, 18)
        });
        worst.push(("shuffle".into(), r.max_rel_error));
    }
    {
        let mut store = ParamStore::new();
        let logits = store.add("logits", random(&[2, 5], 4), true);
        let r = check(&store, |t| {
            let lv = t.param(logits);
            t.actor_loss(lv, &[3, 0], &[1.7, -0.4], 0.5)
        });
        worst.push(("actor_loss".into(), r.max_rel_error));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let name = &worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    (max <= REL_TOL, format!("{} layer checks, worst rel error {max:.2e} ({name})", worst.len()))
}

// ---------------------------------------------------------------- 2

fn clustering_oracle() -> (bool, String) {
    let mut rng = rng_for(2024, 2);
    let mut mismatches = 0;
    let mut non_monotone = 0;
    let mut worst_gap: f64 = 0.0;
    for instance in 0..50u64 {
        let n = rng.random_range(3..=8);
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(1..=3.min(n));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let fit = fit_points(&points, KMeansConfig::new(k, instance)).unwrap();
        let oracle = exhaustive_partition_sse(&zscore(&points), k);
        let gap = (fit.inertia - oracle).abs();
        worst_gap = worst_gap.max(gap);
        if gap > 1e-9 * (1.0 + oracle) {
            mismatches += 1;
        }
        for h in &fit.restart_histories {
            if h.windows(2).any(|w| w[1] > w[0] + 1e-12) {
                non_monotone += 1;
            }
        }
    }
    (
        mismatches == 0 && non_monotone == 0,
        format!("50 instances, {mismatches} SSE mismatches (max gap {worst_gap:.1e}), {non_monotone} non-monotone histories"),
    )
}

// ---------------------------------------------------------------- 3

fn corpus_segments(cfg: &ExperimentConfig) -> Vec<Segment> {
    let manifest = corpus_manifest(cfg);
    manifest
        .traces
        .iter()
        .flat_map(|e| {
            let trace = resample_1hz(&manifest.synthesize(e).unwrap()).unwrap();
            segment_trace(&trace, cfg.segment_seconds).unwrap()
        })
        .collect()
}

fn k_sweep_shape() -> (bool, String) {
    let cfg = ExperimentConfig::desk();
    let segments = corpus_segments(&cfg);
    let report = sweep_k(&segments, 2..=8, cfg.seed).unwrap();
    let sse: Vec<f64> = report.entries.iter().map(|e| e.sse).collect();
    let decreasing = sse.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = sse.iter().map(|s| format!("{s:.0}")).collect();
    (
        segments.len() >= 500 && decreasing,
        format!("{} segments, SSE k=2..8: {}", segments.len(), shown.join(" > ")),
    )
}

// ---------------------------------------------------------------- 5

struct Scripted {
    labels: Vec<ConditionLabel>,
    next: Cell<usize>,
}

impl WindowClassifier for Scripted {
    fn classify(&self, _window: &[f64]) -> Result<ConditionLabel, RuntimeError> {
        let i = self.next.get();
        self.next.set(i + 1);
        Ok(self.labels[i])
    }
}

fn confidence_machine() -> (bool, String) {
    let alphabet = [ConditionLabel::Cluster(0), ConditionLabel::Cluster(1), ConditionLabel::Cluster(2)];
    let config = RuntimeConfig::default();
    let warmup = (config.warmup_seconds - 1) / config.segment_seconds;
    let mut sequences = 0;
    let mut mismatches = 0;
    for len in 1..=6u32 {
        for code in 0..3usize.pow(len) {
            let mut c = code;
            let labels: Vec<ConditionLabel> = (0..len)
                .map(|_| {
                    let l = alphabet[c % 3];
                    c /= 3;
                    l
                })
                .collect();
            let classifier = Scripted {
                labels: labels.clone(),
                next: Cell::new(0),
            };
            let mut state = RuntimeState::new(config).unwrap();
            let got: Vec<ConditionLabel> = (0..labels.len()).map(|_| state.tick(&classifier).unwrap().active).collect();
            if got != confidence_reference(&labels, warmup) {
                mismatches += 1;
            }
            sequences += 1;
        }
    }
    (
        mismatches == 0 && sequences == 1092,
        format!("{sequences} sequences of length 1..=6 ({} of length 6), {mismatches} mismatches", 3usize.pow(6)),
    )
}

// ---------------------------------------------------------------- 6

struct RandomPolicy(ChaCha8Rng);

impl AbrPolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError> {
        Ok(self.0.random_range(0..obs.ladder_len()))
    }
}

fn random_trace(rng: &mut ChaCha8Rng, i: usize) -> ResampledTrace {
    let len = rng.random_range(20..400);
    let level = rng.random_range(0.05..8.0);
    let values = (0..len)
        .map(|_| {
            if rng.random_bool(0.03) {
                0.0
            } else {
                (level * rng.random_range(0.2..1.8f64)).max(0.01)
            }
        })
        .collect();
    ResampledTrace::from_values(format!("r{i}"), values)
}

fn simulator_invariants() -> (bool, String) {
    let sim = Simulator::default();
    let cap = sim.config.buffer_cap;
    let mut rng = rng_for(6, 6);
    let mut chunks = 0usize;
    let mut worst_qoe: f64 = 0.0;
    let mut worst_clock: f64 = 0.0;
    let mut buffer_violations = 0;
    for i in 0..1000 {
        let trace = random_trace(&mut rng, i);
        let total = rng.random_range(1..80);
        let manifest = generate_manifest(&DEFAULT_LADDER_KBPS, 4.0, total, rng.random_range(0.0..0.2), i as u64).unwrap();
        let start = rng.random_range(0..trace.len()) as f64;
        let mut policy = RandomPolicy(rng_for(i as u64, 61));
        let initial = SimState::start(start);
        let results: Vec<ChunkResult> = sim.run_episode_from(initial.clone(), &manifest, &trace, &mut policy).unwrap();
        chunks += results.len();
        let mut state = initial;
        for r in &results {
            if !(0.0..=cap).contains(&r.buffer_after) {
                buffer_violations += 1;
            }
            let identity = r.utility - sim.qoe.rebuffer_penalty * r.rebuffer - sim.qoe.smoothness_penalty * r.smoothness;
            worst_qoe = worst_qoe.max((r.qoe - identity).abs());
            state.clock += r.download_time + r.sleep;
            state.buffer = r.buffer_after;
        }
        // Wall clock = content downloaded - content still buffered + time spent stalled.
        let rebuffer: f64 = results.iter().map(|r| r.rebuffer).sum();
        let content = manifest.chunk_duration * results.len() as f64;
        worst_clock = worst_clock.max((state.clock - (content - state.buffer + rebuffer)).abs());
    }
    (
        buffer_violations == 0 && worst_qoe <= 1e-9 && worst_clock <= 1e-6,
        format!(
            "1000 episodes / {chunks} chunks: {buffer_violations} buffer violations, max QoE identity error {worst_qoe:.1e}, max clock error {worst_clock:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn rl_sanity() -> (bool, String) {
    let sim = Simulator::default();
    let trace = ResampledTrace::from_values("const-4", vec![4.0; 400]);
    let manifest = generate_manifest(&DEFAULT_LADDER_KBPS, 4.0, 48, 0.1, 7).unwrap();
    let mean = |r: &[ChunkResult]| r.iter().map(|c| c.qoe).sum::<f64>() / r.len() as f64;
    let fixed: Vec<f64> = (0..manifest.ladder_len())
        .map(|i| mean(&sim.run_episode(&manifest, &trace, &mut FixedPolicy::new(i, manifest.ladder_len()).unwrap()).unwrap()))
        .collect();
    let best_fixed = fixed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cfg = TrainConfig {
        actor_lr: 1e-3,
        critic_lr: 1e-2,
        entropy_weight: 0.5,
        entropy_final: Some(0.05),
        workers: 4,
        episodes: 10_000,
        eval_every: 5,
        seed: 3,
        arch: PolicyArch {
            channels: 16,
            hidden: 32,
            ..PolicyArch::default()
        },
        ..TrainConfig::default()
    };
    let (model, _) = train_model(&cfg, "constant", &[&trace], std::slice::from_ref(&manifest), &sim).unwrap();
    let learned = mean(&sim.run_episode(&manifest, &trace, &mut GreedyPolicy { model: &model, label: "rl" }).unwrap());
    (
        learned > best_fixed,
        format!("learned {learned:.4} vs best fixed {best_fixed:.4} (fixed: {})", fixed.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ")),
    )
}

// ---------------------------------------------------------------- 4, 8, 9

struct PipelineRun {
    classifier_secs: f64,
    total_secs: f64,
    report: TrainReport,
    summary: eval::EvalSummary,
}

fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> PipelineRun {
    let start = Instant::now();
    eval::cmd_corpus(cfg, out).unwrap();
    eval::cmd_cluster(cfg, out).unwrap();
    let t = Instant::now();
    let (_, report) = eval::cmd_train_classifier(cfg, out).unwrap();
    let classifier_secs = t.elapsed().as_secs_f64();
    eval::cmd_train_zoo(cfg, out).unwrap();
    eval::cmd_evaluate(cfg, out).unwrap();
    let summary = eval::cmd_report(cfg, out).unwrap();
    PipelineRun {
        classifier_secs,
        total_secs: start.elapsed().as_secs_f64(),
        report,
        summary,
    }
}

fn main() {
    let mut outcomes = vec![
        timed(1, "gradient correctness", 60.0, gradient_checks),
        timed(2, "clustering oracle", 60.0, clustering_oracle),
        timed(3, "k-sweep shape", 120.0, k_sweep_shape),
        timed(5, "confidence state machine", 1.0, confidence_machine),
        timed(6, "simulator invariants", 60.0, simulator_invariants),
        timed(7, "rl sanity", 900.0, rl_sanity),
    ];

    let cfg = ExperimentConfig::desk();
    assert_eq!(cfg.rl.workers, 1);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_pipeline(&cfg, dir_a.path());

    let acc = a.report.final_accuracy;
    outcomes.push(Outcome {
        id: 4,
        name: "classifier attainability",
        pass: acc >= 0.90 && a.report.epochs <= 100 && a.classifier_secs < 600.0,
        detail: format!(
            "validation accuracy {acc:.4} (best epoch {} of {}), {} train / {} validation windows",
            a.report.best_epoch, a.report.epochs, a.report.train_windows, a.report.validation_windows
        ),
        secs: a.classifier_secs,
    });

    let q = |p: &str| a.summary.row(p).map(|r| r.mean_qoe).unwrap();
    let (ant, general, rate, buffer) = (q("ant"), q("general-only"), q("rate-based"), q("buffer-based"));
    let directional = ant >= general && ant > rate && ant > buffer && general > rate && general > buffer;
    outcomes.push(Outcome {
        id: 8,
        name: "end-to-end direction",
        pass: directional && a.total_secs < 1800.0,
        detail: format!("mean QoE ant {ant:.4}, general-only {general:.4}, rate-based {rate:.4}, buffer-based {buffer:.4}"),
        secs: a.total_secs,
    });

    let b = run_pipeline(&cfg, dir_b.path());
    let snap_a = snapshot_dir(dir_a.path()).unwrap();
    let snap_b = snapshot_dir(dir_b.path()).unwrap();
    let differing: Vec<&str> = snap_a
        .iter()
        .zip(&snap_b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = snap_a.len() == snap_b.len() && differing.is_empty();
    outcomes.push(Outcome {
        id: 9,
        name: "determinism",
        pass: same && b.total_secs < 1800.0,
        detail: if same {
            format!("{} artifacts byte-identical across two runs with 1 worker", snap_a.len())
        } else {
            format!("{} of {} artifacts differ, first: {:?}", differing.len(), snap_a.len(), differing.first())
        },
        secs: b.total_secs,
    });

    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        println!(
            "criterion {} {:<26} {}  [{:.1} s] {}",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.secs,
            o.detail
        );
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if passed < outcomes.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
