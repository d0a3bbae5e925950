mod common;

use std::collections::BTreeMap;

use common::{run, scenario, scenario_dir, small};
use dflshield_core::adversary::{is_participant, mitigated_by, AttackKind, AttackPlan, TapSpec, Threat};
use dflshield_core::controller::TopologySpec;
use dflshield_core::fabric::{FrameKind, FrameLogEntry};
use dflshield_core::ids::{NodeId, SecuritySetting};
use dflshield_core::node::NodeEventKind;
use dflshield_core::scenario::{RunOutput, RunStatus, ScenarioConfig};
use proptest::prelude::*;

fn plan(kind: AttackKind, target: u32, start: u32, end: Option<u32>) -> AttackPlan {
    AttackPlan {
        kind,
        target,
        attackers: 1,
        start_round: start,
        end_round: end,
        tap: TapSpec::All,
        monte_carlo_rounds: 2000,
    }
}

fn with_attack(mut cfg: ScenarioConfig, p: AttackPlan) -> ScenarioConfig {
    cfg.attack = Some(p);
    cfg
}

fn frames(out: &RunOutput) -> &[FrameLogEntry] {
    out.frames.as_deref().expect("simulated runs keep a frame log")
}

/// `(from_us, until_us)` token validity windows per node.
fn token_windows(out: &RunOutput) -> BTreeMap<NodeId, Vec<(u64, u64)>> {
    out.nodes
        .iter()
        .map(|n| {
            let w = n
                .events
                .iter()
                .filter_map(|e| match e.kind {
                    NodeEventKind::Authenticated { expires_at } => Some((e.at_us, expires_at * 1000)),
                    _ => None,
                })
                .collect();
            (n.node, w)
        })
        .collect()
}

#[test]
fn model_frames_come_only_from_token_holders() {
    for s in SecuritySetting::ALL {
        let out = run(&small(s));
        assert_eq!(out.status(), &RunStatus::Completed);
        let windows = token_windows(&out);
        let mut models = 0;
        for f in frames(&out).iter().filter(|f| f.kind == FrameKind::ModelExchange) {
            models += 1;
            let held = windows
                .get(&f.src)
                .is_some_and(|w| w.iter().any(|&(from, until)| from <= f.sent_at && f.sent_at < until));
            assert!(held, "{s}: model frame {} from {} without a valid token", f.seq, f.src);
        }
        assert!(models > 0, "{s}: no model traffic");
    }
}

#[test]
fn passive_tap_leaves_the_frame_log_unchanged() {
    for s in SecuritySetting::ALL {
        let plain = run(&small(s));
        let tapped = run(&with_attack(small(s), plan(AttackKind::Eavesdrop, 0, 0, None)));
        assert_eq!(frames(&plain), frames(&tapped), "{s}");
        assert_eq!(plain.rows, tapped.rows, "{s}");
        assert!(!tapped.capture.as_ref().unwrap().frames.is_empty());
    }
}

#[test]
fn plaintext_is_recovered_only_under_baseline() {
    for s in SecuritySetting::ALL {
        let out = run(&with_attack(small(s), plan(AttackKind::Eavesdrop, 0, 0, None)));
        let recovered = out.attack.as_ref().unwrap().plaintext_param_sets_recovered;
        assert_eq!(recovered > 0, s == SecuritySetting::Baseline, "{s}: recovered {recovered}");
    }
}

#[test]
fn mimicry_never_reaches_an_encrypting_target() {
    for name in ["eclipse-encryption", "eclipse-mtd"] {
        let cfg = scenario(name);
        let target = cfg.attack.as_ref().unwrap().target_id();
        let out = run(&cfg);
        let a = out.attack.as_ref().unwrap();
        assert!(!a.control_established, "{name}");
        assert_eq!(a.plaintext_param_sets_recovered, 0, "{name}");
        let t = out.node(target).unwrap();
        for r in &t.records {
            assert!(
                r.accepted_sources.iter().all(|s| is_participant(*s)),
                "{name}: round {} accepted {:?}",
                r.round,
                r.accepted_sources
            );
        }
    }
}

#[test]
fn baseline_eclipse_takes_control() {
    let out = run(&scenario("eclipse-baseline"));
    let a = out.attack.as_ref().unwrap();
    assert!(a.control_established && a.success);
    assert!(a.plaintext_param_sets_recovered >= a.isolated_rounds);
}

fn full_graph(security: SecuritySetting, rounds: u32) -> ScenarioConfig {
    let mut c = small(security);
    c.scenario.topology = TopologySpec::Full;
    c.scenario.rounds = rounds;
    c
}

#[test]
fn network_map_recall_full_on_static_graph_and_lower_under_mtd() {
    let base = run(&with_attack(
        full_graph(SecuritySetting::Baseline, 5),
        plan(AttackKind::NetworkMap, 0, 0, None),
    ));
    assert_eq!(base.attack.as_ref().unwrap().topology_recall, Some(1.0));
    let mtd = run(&with_attack(
        full_graph(SecuritySetting::EncryptionMtd, 5),
        plan(AttackKind::NetworkMap, 0, 2, Some(2)),
    ));
    let r = mtd.attack.as_ref().unwrap().topology_recall.unwrap();
    assert!(r < 1.0, "single-round recall {r}");
}

#[test]
fn mitigation_matrix_agrees_with_attack_outcomes() {
    for s in SecuritySetting::ALL {
        let eaves = run(&with_attack(small(s), plan(AttackKind::Eavesdrop, 0, 0, None)));
        let leaked = eaves.attack.unwrap().plaintext_param_sets_recovered > 0;
        assert_eq!(mitigated_by(s, Threat::Eavesdropping), !leaked, "{s}");

        let eclipse = run(&scenario(match s {
            SecuritySetting::Baseline => "eclipse-baseline",
            SecuritySetting::Encryption => "eclipse-encryption",
            SecuritySetting::EncryptionMtd => "eclipse-mtd",
        }));
        assert_eq!(mitigated_by(s, Threat::Eclipse), !eclipse.attack.unwrap().success, "{s}");

        let map = run(&with_attack(full_graph(s, 3), plan(AttackKind::NetworkMap, 0, 1, Some(1))));
        assert_eq!(mitigated_by(s, Threat::NetworkMapping), !map.attack.unwrap().success, "{s}");
    }
}

#[test]
fn same_seed_gives_identical_reports_and_frames() {
    let cfg = small(SecuritySetting::EncryptionMtd);
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.rows, b.rows);
    assert_eq!(frames(&a), frames(&b));
    let mut other = cfg.clone();
    other.scenario.seed += 1;
    assert_ne!(frames(&a), frames(&run(&other)));
}

#[test]
fn every_scenario_file_validates_and_round_trips() {
    let mut seen = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ScenarioConfig::load(&path).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
            seen += 1;
        }
    }
    assert!(seen >= 9);
}

fn config_strategy() -> impl Strategy<Value = ScenarioConfig> {
    (
        0..=i64::MAX as u64,
        2u32..40,
        0u32..30,
        prop::sample::select(SecuritySetting::ALL.to_vec()),
        prop_oneof![
            Just(TopologySpec::Ring),
            Just(TopologySpec::Full),
            (0.05f64..1.0).prop_map(|p| TopologySpec::Random { p }),
        ],
        (1e-4f64..1.0, 0.0f64..0.01, 1usize..4),
        prop::collection::vec(1usize..32, 0..3),
        (0.0f64..0.5, 0.1f64..50.0, 1u32..5),
        prop::option::of(1usize..4),
    )
        .prop_map(|(seed, nodes, rounds, sec, topo, (lr, l2, epochs), hidden, (loss, lat, renew), n)| {
            let mut c = scenario("baseline-8");
            c.scenario.seed = seed;
            c.scenario.nodes = nodes;
            c.scenario.rounds = rounds;
            c.scenario.security = sec;
            c.scenario.topology = topo;
            c.train.learning_rate = lr;
            c.train.l2_lambda = l2;
            c.train.local_epochs = epochs;
            c.train.hidden = hidden;
            c.fabric.loss_rate = loss;
            c.fabric.latency_mean_ms = lat;
            c.security.renewal_interval = renew;
            c.mtd.sample_size = n.map(|k| k.min(nodes as usize - 1));
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn config_round_trips_through_toml(cfg in config_strategy()) {
        prop_assert!(cfg.validate().is_ok());
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn traffic_totals_recompute_from_the_frame_log() {
    let mut last_pct = -1.0;
    for s in SecuritySetting::ALL {
        let out = run(&small(s));
        let log = frames(&out);
        let sent: u64 = log.iter().map(|f| f.wire_len as u64).sum();
        let control: u64 = log
            .iter()
            .filter(|f| f.kind != FrameKind::ModelExchange)
            .map(|f| f.wire_len as u64)
            .sum();
        assert_eq!(out.summary.total_bytes, sent, "{s}");
        assert_eq!(out.summary.control_bytes, control, "{s}");
        let pct = control as f64 / sent as f64 * 100.0;
        assert!((out.summary.ctrl_overhead_pct - pct).abs() < 1e-9, "{s}");
        assert!(pct > last_pct, "{s}: {pct} after {last_pct}");
        last_pct = pct;
    }
}
