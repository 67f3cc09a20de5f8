use marlin_core::node::TxnKind;
use marlin_core::verifier::explore::{explore, replay, shortest_violation, ExploreConfig, ExploreOutcome, TxnSpec, Workload};
use marlin_core::verifier::Invariant;
use marlin_core::NodeId;

fn add_delete() -> ExploreConfig {
    let mut cfg = ExploreConfig::new(3, 2, 2);
    cfg.workload = Workload::Custom(vec![
        TxnSpec {
            to: NodeId(1),
            kind: TxnKind::AddNode {
                node: NodeId(4),
                address: "n4".into(),
            },
        },
        TxnSpec {
            to: NodeId(2),
            kind: TxnKind::DeleteNode { node: NodeId(3) },
        },
    ]);
    cfg.spare_nodes = vec![NodeId(4)];
    cfg.expect_commits = Some(1);
    cfg
}

#[test]
fn skip_guard_schedule_replays_to_the_same_violation() {
    let mut cfg = ExploreConfig::new(2, 2, 2);
    cfg.skip_guard = true;
    let r = explore(&cfg);
    assert_eq!(r.outcome, ExploreOutcome::Violation);
    let schedule = shortest_violation(&cfg, 64).expect("a violating schedule");
    assert!(schedule.len() <= r.schedule.len());
    let (trace, vs) = replay(&cfg, &schedule).unwrap();
    assert!(!vs.is_empty());
    assert!(!trace.records.is_empty());
}

#[test]
fn unconditional_append_lets_both_membership_changes_commit() {
    let mut cfg = add_delete();
    assert_eq!(explore(&cfg).outcome, ExploreOutcome::Clean);
    cfg.no_cas = true;
    let r = explore(&cfg);
    assert_eq!(r.outcome, ExploreOutcome::Violation);
    assert!(r.violations.iter().any(|v| v.invariant == Invariant::Exclusion), "{:?}", r.violations);
}

#[test]
fn reduction_agrees_with_full_search() {
    let mut cfg = ExploreConfig::new(3, 3, 3);
    let reduced = explore(&cfg);
    cfg.reduce = false;
    let full = explore(&cfg);
    assert_eq!(reduced.outcome, ExploreOutcome::Clean);
    assert_eq!(full.outcome, ExploreOutcome::Clean);
    assert!(reduced.states <= full.states);
}

#[test]
fn single_crash_keeps_ownership_unique() {
    let mut cfg = ExploreConfig::new(2, 2, 1);
    cfg.crashes = 1;
    let r = explore(&cfg);
    assert_eq!(r.outcome, ExploreOutcome::Clean, "{:?}", r.violations);
}

#[test]
fn state_budget_is_inconclusive() {
    let mut cfg = ExploreConfig::new(3, 6, 6);
    cfg.max_states = 50;
    assert_eq!(explore(&cfg).outcome, ExploreOutcome::Inconclusive);
}

#[test]
fn stale_write_is_fenced_by_cas() {
    let mut cfg = ExploreConfig::new(2, 2, 2);
    cfg.workload = Workload::StaleWrite;
    assert_eq!(explore(&cfg).outcome, ExploreOutcome::Clean);
    cfg.no_cas = true;
    let r = explore(&cfg);
    assert!(r.violations.iter().any(|v| v.invariant == Invariant::I5), "{:?}", r.violations);
}
