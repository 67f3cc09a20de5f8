//! Migration throughput under a per-log append budget.
//!
//! Every log accepts one commit-path append per tick. Distributed
//! migrations spread their votes over the node logs they touch, so adding
//! nodes adds append capacity. The centralized ablation funnels every
//! migration through the SysLog.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scenario::{Action, GranuleSpec, ScenarioSpec, Settings, TimedAction};
use super::{Sim, SimConfig};
use crate::node::TxnTag;
use crate::types::{LogId, RecordKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub nodes: u32,
    pub centralized: bool,
    pub committed: u64,
    /// Ticks from the first request to the last migration commit.
    pub makespan: u64,
    pub per_tick: f64,
    /// Migration commits landing in a single tick, at most.
    pub peak_per_tick: u64,
    /// SysLog batches written by migrations.
    pub syslog_slots: u64,
    pub pass: bool,
}

/// `per_node` migrations per node over 64 granules per node.
pub fn scaling_spec(nodes: u32, centralized: bool, per_node: u32) -> ScenarioSpec {
    ScenarioSpec {
        name: format!("scaling_{nodes}{}", if centralized { "_central" } else { "" }),
        nodes: (1..=nodes).collect(),
        granules: GranuleSpec::Uniform {
            count: 64 * nodes,
            key_space: 6_400 * u64::from(nodes),
        },
        owners: BTreeMap::new(),
        rows: Vec::new(),
        settings: Settings {
            latency: Some((1, 1)),
            heartbeat: Some(None),
            centralized: Some(centralized),
            throttle: Some(1),
            tick_budget: Some(100_000),
            ..Settings::default()
        },
        actions: vec![TimedAction {
            at: 1,
            action: Action::MigrateBatch {
                count: per_node * nodes,
                spacing: 0,
            },
        }],
    }
}

/// Issues `per_node` random migrations per node at once and measures how
/// fast they drain.
pub fn migration_throughput(nodes: u32, centralized: bool, per_node: u32, seed: u64) -> ThroughputReport {
    let spec = scaling_spec(nodes, centralized, per_node);
    let mut cfg = SimConfig::for_scenario(&spec, seed);
    // Throttled attempts retry almost at once so the logs stay saturated.
    cfg.max_attempts = 100_000;
    cfg.backoff_max = 2;
    let out = Sim::new(cfg, spec).expect("scaling scenario is valid").run();
    let mut per_tick: BTreeMap<u64, u64> = BTreeMap::new();
    for (tick, o) in out.trace.outcomes() {
        if o.tag == TxnTag::Migration && o.decision.is_commit() {
            *per_tick.entry(tick).or_default() += 1;
        }
    }
    let committed: u64 = per_tick.values().sum();
    let last = per_tick.keys().next_back().copied().unwrap_or(1);
    let makespan = last.saturating_sub(1).max(1);
    let syslog_slots = out
        .trace
        .appends()
        .filter(|(_, e)| e.ok && e.by.is_some() && e.log == LogId::SysLog)
        .filter(|(_, e)| e.records.iter().any(|r| !matches!(r.kind, RecordKind::Decision(_))))
        .count() as u64;
    ThroughputReport {
        nodes,
        centralized,
        committed,
        makespan,
        per_tick: committed as f64 / makespan as f64,
        peak_per_tick: per_tick.values().copied().max().unwrap_or(0),
        syslog_slots,
        pass: out.verdict.pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centralized_commits_one_per_syslog_slot() {
        let r = migration_throughput(2, true, 4, 1);
        assert!(r.pass);
        assert!(r.committed > 0);
        assert!(r.peak_per_tick <= 1);
        assert_eq!(r.committed, r.syslog_slots);
    }

    #[test]
    fn distributed_migrations_skip_the_syslog() {
        let r = migration_throughput(2, false, 4, 1);
        assert!(r.pass);
        assert!(r.committed > 0);
        assert_eq!(r.syslog_slots, 0);
    }
}
