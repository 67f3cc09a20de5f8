//! Invariant auditing over ground truth, serialization checks over traces,
//! and an exhaustive interleaving explorer.

pub mod explore;
pub mod truth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::node::TxnTag;
use crate::sim::trace::{Trace, TraceRecord};
use crate::types::{GranuleId, GranuleLayout, Key, LogId, Lsn, NodeId, RecordKind, TxnId, Value};

pub use truth::{GroundTruth, LogView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Invariant {
    D1,
    I0,
    I1,
    I2,
    I3,
    I4,
    I5,
    LostUpdate,
    DuplicateUpdate,
    /// A finished schedule committed the wrong number of conflicting txns.
    Exclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    /// Trace tick, or the explorer depth.
    pub at: u64,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granule: Option<GranuleId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<TxnId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<String>,
}

impl Violation {
    fn new(invariant: Invariant, detail: impl Into<String>) -> Violation {
        Violation {
            invariant,
            at: 0,
            detail: detail.into(),
            granule: None,
            nodes: Vec::new(),
            txn: None,
            schedule: Vec::new(),
        }
    }

    fn granule(mut self, g: GranuleId) -> Violation {
        self.granule = Some(g);
        self
    }

    fn nodes(mut self, n: Vec<NodeId>) -> Violation {
        self.nodes = n;
        self
    }

    fn txn(mut self, t: TxnId) -> Violation {
        self.txn = Some(t);
        self
    }

    pub fn at(mut self, at: u64) -> Violation {
        self.at = at;
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.invariant, self.at, self.detail)
    }
}

/// True when no live log holds a vote without a decision record.
pub fn is_quiescent(views: &BTreeMap<NodeId, LogView>) -> bool {
    views.values().all(|v| v.pending.is_empty())
}

/// I1 through I5 on one cut. I5 demands exactly one capable node only at
/// quiescent cuts; mid-commit, zero capable nodes is legal.
pub fn check_invariants(gt: &GroundTruth, layout: &GranuleLayout) -> Vec<Violation> {
    let views = gt.node_views(false);
    check_views(gt, &views, layout)
}

fn check_views(gt: &GroundTruth, views: &BTreeMap<NodeId, LogView>, layout: &GranuleLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let members = gt.members();
    for m in &members {
        if !views.contains_key(m) {
            out.push(Violation::new(Invariant::I1, format!("member {m} has no live log")).nodes(vec![*m]));
        }
    }
    for (n, v) in views {
        if !members.contains(n) && (v.granules.values().any(|o| o == n) || !v.pending.is_empty()) {
            out.push(Violation::new(Invariant::I1, format!("{n} holds partition state outside the membership")).nodes(vec![*n]));
        }
    }
    let quiescent = is_quiescent(views);
    for g in layout.granules() {
        let owners = GroundTruth::owners_in(views, g);
        if owners.is_empty() {
            out.push(Violation::new(Invariant::I2, format!("{g} has no owner")).granule(g));
        }
        if owners.len() > 1 {
            let names: Vec<String> = owners.iter().map(|n| n.to_string()).collect();
            out.push(
                Violation::new(Invariant::I3, format!("{g} owned by {}", names.join(" and ")))
                    .granule(g)
                    .nodes(owners.clone()),
            );
        }
        if owners.len() != 1 {
            out.push(Violation::new(Invariant::I4, format!("{g} has {} owners", owners.len())).granule(g).nodes(owners.clone()));
        }
        let capable: Vec<NodeId> = owners
            .iter()
            .copied()
            .filter(|n| !views[n].in_doubt.contains(&g))
            .collect();
        if capable.len() > 1 || (quiescent && capable.len() != 1) {
            out.push(
                Violation::new(Invariant::I5, format!("{g} servable by {} nodes", capable.len()))
                    .granule(g)
                    .nodes(capable),
            );
        }
    }
    out
}

/// Streaming audit of a run: invariants at every cut plus the check that
/// each committed user write came from the one node able to serve it.
#[derive(Debug, Clone)]
pub struct Auditor {
    pub gt: GroundTruth,
    layout: GranuleLayout,
    pub violations: Vec<Violation>,
    pub cuts: u64,
    /// Stop recording after this many violations.
    cap: usize,
}

impl Auditor {
    pub fn new(layout: GranuleLayout) -> Auditor {
        Auditor {
            gt: GroundTruth::new(),
            layout,
            violations: Vec::new(),
            cuts: 0,
            cap: 64,
        }
    }

    pub fn observe(&mut self, r: &TraceRecord) {
        match r {
            TraceRecord::Create { log, .. } => self.gt.create(*log),
            TraceRecord::Delete { tick, log } => {
                self.gt.delete(*log);
                self.cut(*tick);
            }
            TraceRecord::Append { tick, event } if event.ok => {
                if let LogId::NodeLog(n) = event.log {
                    self.audit_user_write(*tick, n, event);
                }
                self.gt.apply(event);
                // Bootstrap installs are not protocol steps.
                if event.by.is_some() {
                    self.cut(*tick);
                }
            }
            _ => {}
        }
    }

    fn audit_user_write(&mut self, tick: u64, n: NodeId, ev: &crate::log_store::AppendEvent) {
        if ev.by.is_none() {
            return;
        }
        let mut granules = BTreeSet::new();
        for r in ev.records.iter().filter(|r| r.kind == RecordKind::Updates) {
            for op in &r.ops {
                if let crate::types::WriteOp::User { key, .. } = op {
                    if let Some(g) = self.layout.granule_of(*key) {
                        granules.insert((g, r.txn));
                    }
                }
            }
        }
        if granules.is_empty() {
            return;
        }
        let views = self.gt.node_views(false);
        for (g, txn) in granules {
            let ok = views.get(&n).is_some_and(|v| v.granules.get(&g) == Some(&n) && !v.in_doubt.contains(&g));
            if !ok {
                self.record(
                    Violation::new(Invariant::I5, format!("user write on {g} committed by {n}, which cannot serve it"))
                        .granule(g)
                        .nodes(vec![n])
                        .txn(txn)
                        .at(tick),
                );
            }
        }
    }

    fn cut(&mut self, tick: u64) {
        self.cuts += 1;
        for v in check_invariants(&self.gt, &self.layout) {
            self.record(v.at(tick));
        }
    }

    fn record(&mut self, v: Violation) {
        if self.violations.len() < self.cap {
            self.violations.push(v);
        }
    }
}

/// Runs the streaming audit over a whole trace.
pub fn audit_trace(trace: &Trace, layout: &GranuleLayout) -> Auditor {
    let mut a = Auditor::new(layout.clone());
    for r in &trace.records {
        a.observe(r);
    }
    a
}

/// I0: per log, successful appends are gap-free and each landed exactly at
/// the LSN its caller had tracked; every committed transaction's recorded
/// positions match its own appends; and the per-log orders of committed
/// reconfiguration transactions agree with one another.
pub fn check_serialization(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut tails: BTreeMap<LogId, Lsn> = BTreeMap::new();
    // (log, lsn) -> txns with a payload record in that batch
    let mut payload: BTreeMap<(LogId, Lsn), BTreeSet<TxnId>> = BTreeMap::new();
    for (tick, ev) in trace.appends() {
        if !ev.ok {
            continue;
        }
        let tail = tails.entry(ev.log).or_default();
        if ev.lsn != tail.next() {
            out.push(Violation::new(Invariant::I0, format!("{} jumped from {} to {}", ev.log, tail.0, ev.lsn.0)).at(tick));
        }
        if ev.target != *tail {
            out.push(
                Violation::new(
                    Invariant::I0,
                    format!("{} accepted an append aimed at {} while its tail was {}", ev.log, ev.target.0, tail.0),
                )
                .at(tick),
            );
        }
        *tail = ev.lsn;
        let set = payload.entry((ev.log, ev.lsn)).or_default();
        for r in &ev.records {
            if !matches!(r.kind, RecordKind::Decision(_)) {
                set.insert(r.txn);
            }
        }
    }
    let mut order: BTreeMap<LogId, Vec<(Lsn, TxnId)>> = BTreeMap::new();
    for (tick, o) in trace.outcomes() {
        if !o.decision.is_commit() {
            continue;
        }
        for (log, lsn) in &o.positions {
            if !payload.get(&(*log, *lsn)).is_some_and(|s| s.contains(&o.txn)) {
                out.push(
                    Violation::new(Invariant::I0, format!("{} claims {log}@{} but no such append exists", o.txn, lsn.0))
                        .txn(o.txn)
                        .at(tick),
                );
            }
            if o.tag.is_reconfiguration() {
                order.entry(*log).or_default().push((*lsn, o.txn));
            }
        }
    }
    // Any pair of committed reconfigurations that touch a common granule
    // and share two logs must be ordered the same way on both.
    let touched: BTreeMap<TxnId, BTreeSet<GranuleId>> = trace
        .outcomes()
        .filter(|(_, o)| o.decision.is_commit())
        .map(|(_, o)| (o.txn, o.granules.iter().copied().collect()))
        .collect();
    let mut rank: BTreeMap<TxnId, BTreeMap<LogId, Lsn>> = BTreeMap::new();
    for (log, entries) in &order {
        let mut seen = BTreeSet::new();
        for (lsn, txn) in entries {
            if !seen.insert(*lsn) {
                out.push(Violation::new(Invariant::I0, format!("two commits claim {log}@{}", lsn.0)).txn(*txn));
            }
            rank.entry(*txn).or_default().insert(*log, *lsn);
        }
    }
    let txns: Vec<_> = rank.iter().collect();
    for (i, (a, ra)) in txns.iter().enumerate() {
        for (b, rb) in &txns[i + 1..] {
            if touched[*a].is_disjoint(&touched[*b]) {
                continue;
            }
            let mut before = None;
            for (log, la) in ra.iter() {
                if let Some(lb) = rb.get(log) {
                    let ab = la < lb;
                    if *before.get_or_insert(ab) != ab {
                        out.push(
                            Violation::new(Invariant::I0, format!("{a} and {b} commit in opposite orders across logs")).txn(**a),
                        );
                        break;
                    }
                }
            }
        }
    }
    out
}

/// Lost and duplicated user updates. Each key's value under ground truth,
/// read at its owner, must equal the last committed write in trace order,
/// and every committed write must sit in exactly one log batch.
pub fn check_user_data(trace: &Trace, gt: &GroundTruth, layout: &GranuleLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut expected: BTreeMap<Key, Value> = BTreeMap::new();
    let mut committed: BTreeSet<TxnId> = BTreeSet::new();
    for (_, o) in trace.outcomes() {
        if o.tag == TxnTag::User && o.decision.is_commit() {
            committed.insert(o.txn);
            for (k, v) in &o.writes {
                expected.insert(*k, *v);
            }
        }
    }
    let boot = TxnId::external(0);
    let mut copies: BTreeMap<TxnId, usize> = BTreeMap::new();
    let mut initial: BTreeMap<Key, Value> = BTreeMap::new();
    for (log, _, txn, writes) in gt.user_updates() {
        if txn == boot {
            initial.extend(writes);
            continue;
        }
        *copies.entry(txn).or_default() += 1;
        if !committed.contains(&txn) {
            out.push(
                Violation::new(Invariant::DuplicateUpdate, format!("{txn} wrote to {log} without a commit outcome")).txn(txn),
            );
        }
    }
    for t in &committed {
        let n = copies.get(t).copied().unwrap_or(0);
        let wrote = trace.outcomes().any(|(_, o)| o.txn == *t && !o.writes.is_empty());
        if wrote && n != 1 {
            out.push(Violation::new(Invariant::DuplicateUpdate, format!("{t} appears in {n} update batches")).txn(*t));
        }
    }
    for (k, v) in initial {
        expected.entry(k).or_insert(v);
    }
    let views = gt.node_views(true);
    for (k, want) in expected {
        let Some(g) = layout.granule_of(k) else {
            continue;
        };
        let owners = GroundTruth::owners_in(&views, g);
        let [owner] = owners.as_slice() else {
            continue;
        };
        let got = views[owner].users.get(&k).copied();
        if got != Some(want) {
            out.push(
                Violation::new(
                    Invariant::LostUpdate,
                    format!("key {k} at owner {owner} holds {got:?}, last committed write was {want}"),
                )
                .granule(g)
                .nodes(vec![*owner]),
            );
        }
    }
    out
}

/// Offline audit: everything `run` checks inline, recomputed from a trace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub quiescent: bool,
    pub cuts: u64,
    pub committed: u64,
    pub aborted: u64,
    pub violations: Vec<Violation>,
}

pub fn verify_trace(trace: &Trace, layout: &GranuleLayout) -> Verdict {
    let audit = audit_trace(trace, layout);
    let mut violations = audit.violations.clone();
    violations.extend(check_serialization(trace));
    violations.extend(check_user_data(trace, &audit.gt, layout));
    let quiescent = trace
        .records
        .iter()
        .rev()
        .find_map(|r| match r {
            TraceRecord::End { quiescent, .. } => Some(*quiescent),
            _ => None,
        })
        .unwrap_or(false);
    let committed = trace.outcomes().filter(|(_, o)| o.decision.is_commit()).count() as u64;
    let aborted = trace.outcomes().count() as u64 - committed;
    Verdict {
        pass: violations.is_empty(),
        quiescent,
        cuts: audit.cuts,
        committed,
        aborted,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_scenario;
    use crate::sim::scenario::{bundled, ScenarioSpec};
    use crate::types::WriteOp;

    fn fig5() -> (Trace, GranuleLayout) {
        let spec = ScenarioSpec::from_json(bundled::get("fig5_scaleout").unwrap()).unwrap();
        let out = run_scenario(&spec, 1).unwrap();
        let layout = out.trace.layout().unwrap().clone();
        (out.trace, layout)
    }

    fn found(v: &Verdict, inv: Invariant) -> bool {
        v.violations.iter().any(|x| x.invariant == inv)
    }

    fn first_user_commit(t: &Trace) -> TxnId {
        t.outcomes()
            .find(|(_, o)| o.tag == TxnTag::User && o.decision.is_commit())
            .map(|(_, o)| o.txn)
            .unwrap()
    }

    #[test]
    fn clean_trace_passes_offline() {
        let (t, layout) = fig5();
        let v = verify_trace(&t, &layout);
        assert!(v.pass && v.quiescent, "{:?}", v.violations);
        assert!(v.cuts > 0);
    }

    #[test]
    fn write_outside_the_partition_is_i5() {
        let (mut t, layout) = fig5();
        for r in &mut t.records {
            if let TraceRecord::Append { event, .. } = r {
                if event.log == LogId::NodeLog(NodeId(3)) {
                    for rec in &mut event.records {
                        for op in &mut rec.ops {
                            if let WriteOp::User { key, .. } = op {
                                *key = 50;
                            }
                        }
                    }
                }
            }
        }
        assert!(found(&verify_trace(&t, &layout), Invariant::I5));
    }

    #[test]
    fn changed_value_is_a_lost_update() {
        let (mut t, layout) = fig5();
        let txn = first_user_commit(&t);
        for r in &mut t.records {
            if let TraceRecord::Outcome { outcome, .. } = r {
                if outcome.txn == txn {
                    for w in &mut outcome.writes {
                        w.1 += 1;
                    }
                }
            }
        }
        assert!(found(&verify_trace(&t, &layout), Invariant::LostUpdate));
    }

    #[test]
    fn write_without_outcome_is_flagged() {
        let (mut t, layout) = fig5();
        let txn = first_user_commit(&t);
        t.records
            .retain(|r| !matches!(r, TraceRecord::Outcome { outcome, .. } if outcome.txn == txn));
        assert!(found(&verify_trace(&t, &layout), Invariant::DuplicateUpdate));
    }

    #[test]
    fn phantom_position_breaks_serialization() {
        let (mut t, _) = fig5();
        for r in &mut t.records {
            if let TraceRecord::Outcome { outcome, .. } = r {
                if outcome.tag == TxnTag::AddNode {
                    outcome.positions = vec![(LogId::SysLog, Lsn(9))];
                }
            }
        }
        let v = check_serialization(&t);
        assert!(v.iter().any(|x| x.invariant == Invariant::I0), "{v:?}");
    }

    #[test]
    fn violations_serialize() {
        let v = Violation::new(Invariant::I3, "two owners").granule(GranuleId(1)).at(4);
        let back: Violation = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(v.to_string().contains("two owners"));
    }
}
