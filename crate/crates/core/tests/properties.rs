use proptest::prelude::*;

use marlin_core::node::TxnKind;
use marlin_core::sim::scenario::{bundled, ScenarioSpec};
use marlin_core::sim::run_scenario;
use marlin_core::verifier::explore::{explore, ExploreConfig, ExploreOutcome, TxnSpec, Workload};
use marlin_core::{GranuleId, NodeId};

fn mixed() -> ScenarioSpec {
    ScenarioSpec::from_json(bundled::get("mixed").unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_latency_keeps_mixed_runs_safe(seed in any::<u64>(), lo in 1u64..3, spread in 0u64..4) {
        let mut spec = mixed();
        spec.settings.latency = Some((lo, lo + spread));
        let out = run_scenario(&spec, seed).unwrap();
        prop_assert!(out.verdict.pass, "{:?}", out.verdict.violations);
        prop_assert!(out.verdict.quiescent);
    }

    #[test]
    fn any_two_migrations_are_safe(
        moves in prop::collection::vec((1u32..=2, 1u32..=3, 1u32..=3, 1u32..=3), 2),
    ) {
        let txns = moves
            .iter()
            .map(|(g, src, dst, to)| TxnSpec {
                to: NodeId(*to),
                kind: TxnKind::Migration { granules: vec![GranuleId(*g)], src: NodeId(*src), dst: NodeId(*dst) },
            })
            .collect();
        let mut cfg = ExploreConfig::new(3, 2, 2);
        cfg.workload = Workload::Custom(txns);
        let r = explore(&cfg);
        prop_assert_eq!(r.outcome, ExploreOutcome::Clean, "{:?}", r.violations);
    }
}
