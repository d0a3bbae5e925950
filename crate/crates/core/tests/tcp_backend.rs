mod common;

use common::{scenario, scenario_dir, small};
use dflshield_core::adversary::{AttackKind, AttackPlan, TapSpec};
use dflshield_core::fabric::Backend;
use dflshield_core::ids::SecuritySetting;
use dflshield_core::scenario::{run_scenario, RunStatus, ThreadLauncher};

#[test]
fn loopback_runs_complete_in_every_setting() {
    for s in SecuritySetting::ALL {
        let mut cfg = small(s);
        cfg.scenario.nodes = 4;
        cfg.scenario.rounds = 3;
        let out = run_scenario(&cfg, Some(&scenario_dir()), Backend::Tcp, &ThreadLauncher).unwrap();
        assert_eq!(out.status(), &RunStatus::Completed, "{s}");
        assert_eq!(out.summary.reports, 12, "{s}");
        assert_eq!(out.summary.starved_rounds, 0, "{s}");
        assert!(out.frames.is_none());
        let f1 = out.summary.final_f1.unwrap().mean;
        assert!(f1 > 0.8, "{s}: F1 {f1}");
    }
}

#[test]
fn attacks_are_refused_on_tcp() {
    let mut cfg = scenario("baseline-8");
    cfg.attack = Some(AttackPlan {
        kind: AttackKind::Eavesdrop,
        target: 0,
        attackers: 1,
        start_round: 0,
        end_round: None,
        tap: TapSpec::All,
        monte_carlo_rounds: 10,
    });
    let err = run_scenario(&cfg, None, Backend::Tcp, &ThreadLauncher).unwrap_err();
    assert!(err.is_input_error());
}
