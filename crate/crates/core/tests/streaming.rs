//! Simulator and runtime behaviour seen from outside the crate.

use ant_core::abr::{FixedPolicy, PolicyArch, PolicyModel};
use ant_core::cluster::ConditionLabel;
use ant_core::rl::ModelZoo;
use ant_core::runtime::{AntPolicy, ConstantClassifier, RuntimeConfig, ThroughputRing};
use ant_core::sim::{episode_log, generate_manifest, parse_episode_log, EpisodeHeader, SimState, Simulator, DEFAULT_LADDER_KBPS};
use ant_core::trace::ResampledTrace;
use proptest::prelude::*;

fn arb_trace() -> impl Strategy<Value = ResampledTrace> {
    prop::collection::vec(0.05f64..10.0, 5..200).prop_map(|v| ResampledTrace::from_values("p", v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_policy_episode_respects_buffer_and_clock(
        trace in arb_trace(),
        rung in 0usize..5,
        chunks in 1usize..40,
        start in 0.0f64..50.0,
    ) {
        let sim = Simulator::default();
        let m = generate_manifest(&DEFAULT_LADDER_KBPS, 4.0, chunks, 0.1, 3).unwrap();
        let mut policy = FixedPolicy::new(rung, 5).unwrap();
        let results = sim.run_episode_from(SimState::start(start), &m, &trace, &mut policy).unwrap();
        prop_assert_eq!(results.len(), chunks);
        let mut state = SimState::start(start);
        for (r, expected) in results.iter().zip(0..) {
            prop_assert_eq!(r.chunk, expected);
            prop_assert!(r.buffer_after >= 0.0 && r.buffer_after <= sim.config.buffer_cap);
            prop_assert!(r.download_time >= sim.config.rtt);
            prop_assert!(r.sleep == 0.0 || (r.buffer_after - sim.config.buffer_cap).abs() < 1e-9);
            let (again, next) = sim.step(&state, &m, &trace, rung).unwrap();
            prop_assert_eq!(&again, r);
            state = next;
        }
        prop_assert!(results.iter().skip(1).all(|r| r.smoothness == 0.0));
    }

    #[test]
    fn ring_windows_have_requested_length(
        downloads in prop::collection::vec((1.0f64..9.0, 0.2f64..8.0, 0.0f64..5.0), 1..40),
        len in 1usize..30,
    ) {
        let mut ring = ThroughputRing::new(60);
        let mut clock = 0.0;
        for (dt, rate, sleep) in downloads {
            ring.advance(clock, dt, Some(rate));
            clock += dt;
            ring.advance(clock, sleep, None);
            clock += sleep;
        }
        prop_assert!(ring.values().len() <= 60);
        let end = ring.completed_seconds();
        let w = ring.window(end, len);
        prop_assert_eq!(w.len(), len);
        prop_assert!(w.iter().all(|v| (0.2..8.0).contains(v)));
    }
}

#[test]
fn episode_log_round_trips() {
    let sim = Simulator::default();
    let trace = ResampledTrace::from_values("t", vec![1.5, 0.7, 3.2, 2.4]);
    let m = generate_manifest(&DEFAULT_LADDER_KBPS, 4.0, 10, 0.2, 8).unwrap();
    let results = sim.run_episode(&m, &trace, &mut FixedPolicy::new(2, 5).unwrap()).unwrap();
    let header = EpisodeHeader {
        policy: "fixed-2".into(),
        manifest_id: "m".into(),
        trace_id: "t".into(),
        qoe: sim.qoe,
        chunks: results.len(),
    };
    let (h, back) = parse_episode_log(&episode_log(&header, &results)).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, results);
}

#[test]
fn ant_switches_to_a_consistently_recognised_condition() {
    let arch = PolicyArch {
        channels: 4,
        hidden: 8,
        ..PolicyArch::default()
    };
    let mut zoo = ModelZoo::new(2, PolicyModel::new(arch, 1).unwrap());
    zoo.insert(ConditionLabel::Cluster(1), PolicyModel::new(arch, 2).unwrap());
    let classifier = ConstantClassifier(ConditionLabel::Cluster(1));
    let mut ant = AntPolicy::new(&zoo, &classifier, RuntimeConfig::default()).unwrap();
    let trace = ResampledTrace::from_values("t", vec![2.0; 100]);
    let m = generate_manifest(&DEFAULT_LADDER_KBPS, 4.0, 40, 0.1, 1).unwrap();
    Simulator::default().run_episode(&m, &trace, &mut ant).unwrap();

    let events = ant.events();
    assert!(events.len() >= 4);
    for e in events {
        let expected = if e.clock < 60.0 { ConditionLabel::General } else { ConditionLabel::Cluster(1) };
        assert_eq!(e.active, expected, "at {} s", e.clock);
        assert_eq!(e.admitted, e.clock >= 60.0);
    }
    assert!(events.windows(2).all(|w| w[1].clock - w[0].clock == 20.0));
}
