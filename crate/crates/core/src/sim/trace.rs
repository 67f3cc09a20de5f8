//! Execution records: the JSONL trace and the per-tick metrics derived from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::log_store::{AppendEvent, LogStore, StoreError};
use crate::node::{Outcome, TxnResult, TxnTag};
use crate::types::{GranuleLayout, LogId, Lsn, NodeId, TxnId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Start {
        seed: u64,
        scenario: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout: Option<GranuleLayout>,
    },
    Create {
        tick: u64,
        log: LogId,
    },
    Delete {
        tick: u64,
        log: LogId,
    },
    Append {
        tick: u64,
        #[serde(flatten)]
        event: AppendEvent,
    },
    Step {
        tick: u64,
        node: NodeId,
        input: String,
    },
    Outcome {
        tick: u64,
        #[serde(flatten)]
        outcome: Outcome,
    },
    Reply {
        tick: u64,
        client: u32,
        txn: TxnId,
        tag: TxnTag,
        result: TxnResult,
        attempt: u32,
    },
    Fault {
        tick: u64,
        node: Option<NodeId>,
        fault: String,
    },
    Note {
        tick: u64,
        node: NodeId,
        text: String,
    },
    /// A client gave up after exhausting its retry budget.
    Failure {
        tick: u64,
        client: u32,
        tag: TxnTag,
        reason: String,
    },
    End {
        tick: u64,
        quiescent: bool,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        pending: Vec<String>,
    },
}

impl TraceRecord {
    pub fn tick(&self) -> u64 {
        match self {
            TraceRecord::Start { .. } => 0,
            TraceRecord::Create { tick, .. }
            | TraceRecord::Delete { tick, .. }
            | TraceRecord::Append { tick, .. }
            | TraceRecord::Step { tick, .. }
            | TraceRecord::Outcome { tick, .. }
            | TraceRecord::Reply { tick, .. }
            | TraceRecord::Fault { tick, .. }
            | TraceRecord::Note { tick, .. }
            | TraceRecord::Failure { tick, .. }
            | TraceRecord::End { tick, .. } => *tick,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { records })
    }

    /// The granule layout recorded by the run, if any.
    pub fn layout(&self) -> Option<&GranuleLayout> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Start { layout, .. } => layout.as_ref(),
            _ => None,
        })
    }

    pub fn outcomes(&self) -> impl Iterator<Item = (u64, &Outcome)> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Outcome { tick, outcome } => Some((*tick, outcome)),
            _ => None,
        })
    }

    pub fn appends(&self) -> impl Iterator<Item = (u64, &AppendEvent)> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Append { tick, event } => Some((*tick, event)),
            _ => None,
        })
    }

    /// Rebuilds the final store from the create/append/delete records.
    pub fn replay_store(&self) -> Result<LogStore, StoreError> {
        let store = LogStore::new();
        for r in &self.records {
            match r {
                TraceRecord::Create { log, .. } => store.create_log(*log)?,
                TraceRecord::Delete { log, .. } => store.delete_log(*log)?,
                TraceRecord::Append { event, .. } if event.ok => {
                    store.append(event.log, event.records.clone(), Lsn(event.lsn.0 - 1))?;
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Pretty one-line-per-event narration of the protocol-relevant records.
    pub fn narrate(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = match r {
                TraceRecord::Append { tick, event } if event.ok && event.by.is_some() => {
                    let txns: Vec<String> = event.records.iter().map(|x| format!("{} {:?}", x.txn, kind_name(x))).collect();
                    format!("t={tick} {} appended to {} at LSN {}: {}", by(event.by), event.log, event.lsn.0, txns.join(", "))
                }
                TraceRecord::Append { tick, event } if !event.ok => format!(
                    "t={tick} {} append to {} at LSN {} refused (tail {})",
                    by(event.by),
                    event.log,
                    event.target.0,
                    event.lsn.0
                ),
                TraceRecord::Outcome { tick, outcome } => {
                    let pos: Vec<String> = outcome.positions.iter().map(|(l, n)| format!("{l}@{}", n.0)).collect();
                    format!(
                        "t={tick} {} {} {} -> {:?} {}",
                        outcome.coordinator,
                        outcome.tag.name(),
                        outcome.txn,
                        outcome.decision,
                        pos.join(" ")
                    )
                }
                TraceRecord::Fault { tick, node, fault } => match node {
                    Some(n) => format!("t={tick} fault: {fault} {n}"),
                    None => format!("t={tick} fault: {fault}"),
                },
                TraceRecord::Delete { tick, log } => format!("t={tick} {log} deleted"),
                TraceRecord::Note { tick, node, text } => format!("t={tick} {node}: {text}"),
                TraceRecord::Failure { tick, client, tag, reason } => {
                    format!("t={tick} client {client} gave up on {}: {reason}", tag.name())
                }
                _ => continue,
            };
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

fn by(n: Option<NodeId>) -> String {
    n.map(|n| n.to_string()).unwrap_or_else(|| "boot".into())
}

fn kind_name(r: &crate::types::LogRecord) -> &'static str {
    match r.kind {
        crate::types::RecordKind::Updates => "Updates",
        crate::types::RecordKind::VoteYes { .. } => "VoteYes",
        crate::types::RecordKind::Decision(crate::types::Verdict::Commit) => "Commit",
        crate::types::RecordKind::Decision(crate::types::Verdict::Abort) => "Abort",
    }
}

/// Per-tick commit/abort/redirect counts by transaction kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: BTreeMap<(u64, TxnTag), TickCounts>,
    /// Tick of the last committed migration, if any.
    pub migration_done_at: Option<u64>,
    pub client_failures: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickCounts {
    pub committed: u64,
    pub aborted: u64,
    pub redirects: u64,
}

impl MetricsReport {
    /// Derived purely from the trace so the two always reconcile.
    pub fn from_trace(trace: &Trace) -> MetricsReport {
        let mut m = MetricsReport::default();
        for r in &trace.records {
            match r {
                TraceRecord::Outcome { tick, outcome } => {
                    let row = m.rows.entry((*tick, outcome.tag)).or_default();
                    if outcome.decision.is_commit() {
                        row.committed += 1;
                        if matches!(outcome.tag, TxnTag::Migration | TxnTag::RecoveryMigr) {
                            m.migration_done_at = Some(*tick);
                        }
                    } else {
                        row.aborted += 1;
                    }
                }
                TraceRecord::Reply { tick, tag, result: TxnResult::Aborted(crate::commit::AbortReason::WrongNode(_)), .. } => {
                    m.rows.entry((*tick, *tag)).or_default().redirects += 1;
                }
                TraceRecord::Failure { .. } => m.client_failures += 1,
                _ => {}
            }
        }
        m
    }

    pub fn total(&self, tag: TxnTag) -> TickCounts {
        self.rows
            .iter()
            .filter(|((_, t), _)| *t == tag)
            .fold(TickCounts::default(), |a, (_, c)| TickCounts {
                committed: a.committed + c.committed,
                aborted: a.aborted + c.aborted,
                redirects: a.redirects + c.redirects,
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tick,kind,committed,aborted,redirects\n");
        for ((tick, tag), c) in &self.rows {
            let _ = writeln!(out, "{tick},{},{},{},{}", tag.name(), c.committed, c.aborted, c.redirects);
        }
        if let Some(t) = self.migration_done_at {
            let _ = writeln!(out, "# migration_done_at,{t}");
        }
        let _ = writeln!(out, "# client_failures,{}", self.client_failures);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_scenario;
    use crate::sim::scenario::{bundled, ScenarioSpec};

    fn fig5() -> crate::sim::SimOutput {
        let spec = ScenarioSpec::from_json(bundled::get("fig5_scaleout").unwrap()).unwrap();
        run_scenario(&spec, 1).unwrap()
    }

    #[test]
    fn jsonl_roundtrip() {
        let out = fig5();
        let back = Trace::from_jsonl(&out.trace.to_jsonl()).unwrap();
        assert_eq!(back, out.trace);
        assert!(back.layout().is_some());
    }

    #[test]
    fn replay_rebuilds_the_final_logs() {
        let out = fig5();
        let store = out.trace.replay_store().unwrap();
        let logs = out.cluster.store.logs();
        assert_eq!(store.logs(), logs);
        for l in logs {
            assert_eq!(store.tail(l).unwrap(), out.cluster.store.tail(l).unwrap(), "{l}");
        }
    }

    #[test]
    fn metrics_reconcile_with_outcomes() {
        let out = fig5();
        let csv = out.metrics.to_csv();
        assert!(csv.starts_with("tick,kind,committed,aborted,redirects\n"));
        let committed: u64 = TxnTag::ALL.iter().map(|t| out.metrics.total(*t).committed).sum();
        assert_eq!(committed, out.verdict.committed);
        assert_eq!(out.metrics.total(TxnTag::User).redirects, 1);
        assert!(out.trace.narrate().contains("add_node"));
    }
}
