//! Ground truth: an independent fold of raw log contents.
//!
//! Unlike the page store, which applies a vote once a commit decision shows
//! up on the same log, this fold decides each transaction globally from the
//! vote records on all of its participant logs.

use std::collections::{BTreeMap, BTreeSet};

use crate::log_store::{AppendEvent, Batch, StoreSnapshot};
use crate::types::{GranuleId, Key, LogId, Lsn, NodeId, RecordKind, TxnId, Value, Verdict, WriteOp};

/// What one log says about one transaction, by first occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    Yes,
    Abort,
}

#[derive(Debug, Clone, Default)]
struct History {
    batches: Vec<Batch>,
    marks: BTreeMap<TxnId, Mark>,
    /// Decision records by txn (first wins).
    decisions: BTreeMap<TxnId, Verdict>,
    /// Batch indices holding anything but user-only updates.
    meta: Vec<usize>,
}

impl History {
    fn push(&mut self, batch: Batch) {
        let idx = self.batches.len();
        let mut meta = false;
        for r in &batch {
            match &r.kind {
                RecordKind::Updates => {
                    meta |= r.ops.iter().any(|o| !matches!(o, WriteOp::User { .. }));
                }
                RecordKind::VoteYes { .. } => {
                    meta = true;
                    self.marks.entry(r.txn).or_insert(Mark::Yes);
                }
                RecordKind::Decision(v) => {
                    meta = true;
                    self.decisions.entry(r.txn).or_insert(*v);
                    if *v == Verdict::Abort {
                        self.marks.entry(r.txn).or_insert(Mark::Abort);
                    }
                }
            }
        }
        if meta {
            self.meta.push(idx);
        }
        self.batches.push(batch);
    }
}

/// Rows of one log under global decisions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogView {
    pub members: BTreeSet<NodeId>,
    pub granules: BTreeMap<GranuleId, NodeId>,
    pub users: BTreeMap<Key, Value>,
    /// Granules staged by a vote that has no decision record on this log.
    pub in_doubt: BTreeSet<GranuleId>,
    pub pending: BTreeSet<TxnId>,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    live: BTreeMap<LogId, History>,
    archived: BTreeMap<LogId, History>,
    /// Participant list of every voted transaction.
    participants: BTreeMap<TxnId, Vec<LogId>>,
}

impl GroundTruth {
    pub fn new() -> GroundTruth {
        GroundTruth::default()
    }

    pub fn from_snapshot(snap: &StoreSnapshot) -> GroundTruth {
        let mut gt = GroundTruth::new();
        for a in &snap.archived {
            gt.create(a.log);
            for b in &a.batches {
                gt.push(a.log, b.clone());
            }
            gt.delete(a.log);
        }
        for (log, batches) in &snap.live {
            gt.create(*log);
            for b in batches {
                gt.push(*log, b.clone());
            }
        }
        gt
    }

    pub fn create(&mut self, log: LogId) {
        self.live.entry(log).or_default();
    }

    pub fn delete(&mut self, log: LogId) {
        if let Some(h) = self.live.remove(&log) {
            self.archived.insert(log, h);
        }
    }

    pub fn push(&mut self, log: LogId, batch: Batch) {
        for r in &batch {
            if let RecordKind::VoteYes { participants } = &r.kind {
                self.participants.entry(r.txn).or_insert_with(|| participants.clone());
            }
        }
        self.live.entry(log).or_default().push(batch);
    }

    /// Applies a successful journaled append; failed attempts change nothing.
    pub fn apply(&mut self, ev: &AppendEvent) {
        if ev.ok {
            self.push(ev.log, ev.records.clone());
        }
    }

    pub fn is_live(&self, log: LogId) -> bool {
        self.live.contains_key(&log)
    }

    pub fn live_logs(&self) -> impl Iterator<Item = LogId> + '_ {
        self.live.keys().copied()
    }

    pub fn archived_logs(&self) -> impl Iterator<Item = LogId> + '_ {
        self.archived.keys().copied()
    }

    pub fn tail(&self, log: LogId) -> Option<Lsn> {
        self.live.get(&log).map(|h| Lsn(h.batches.len() as u64))
    }

    /// Global outcome: commit iff every participant log shows the yes vote
    /// before any abort. A deleted log that never voted counts as an abort.
    pub fn verdict(&self, txn: TxnId) -> Option<Verdict> {
        let parts = self.participants.get(&txn)?;
        let mut all_yes = true;
        for log in parts {
            let (h, deleted) = match (self.live.get(log), self.archived.get(log)) {
                (Some(h), _) => (h, false),
                (None, Some(h)) => (h, true),
                (None, None) => return Some(Verdict::Abort),
            };
            match h.marks.get(&txn) {
                Some(Mark::Yes) => {}
                Some(Mark::Abort) => return Some(Verdict::Abort),
                None if deleted => return Some(Verdict::Abort),
                None => all_yes = false,
            }
        }
        all_yes.then_some(Verdict::Commit)
    }

    /// Decisions of every voted transaction that is settled.
    pub fn decisions(&self) -> BTreeMap<TxnId, Verdict> {
        self.participants
            .keys()
            .filter_map(|t| self.verdict(*t).map(|v| (*t, v)))
            .collect()
    }

    /// Folds `log` (live or archived). `users` controls whether user rows
    /// are materialized, which costs a pass over every batch.
    pub fn view(&self, log: LogId, users: bool) -> Option<LogView> {
        let h = self.live.get(&log).or_else(|| self.archived.get(&log))?;
        let mut v = LogView::default();
        let apply = |v: &mut LogView, ops: &[WriteOp]| {
            for op in ops {
                match op {
                    WriteOp::MTable { node, address } => {
                        if address.is_some() {
                            v.members.insert(*node);
                        } else {
                            v.members.remove(node);
                        }
                    }
                    WriteOp::GTable { granule, entry } => match entry {
                        Some(e) => {
                            v.granules.insert(*granule, e.owner);
                        }
                        None => {
                            v.granules.remove(granule);
                        }
                    },
                    WriteOp::User { key, value } if users => match value {
                        Some(x) => {
                            v.users.insert(*key, *x);
                        }
                        None => {
                            v.users.remove(key);
                        }
                    },
                    WriteOp::User { .. } => {}
                }
            }
        };
        let idx: Box<dyn Iterator<Item = usize>> = if users {
            Box::new(0..h.batches.len())
        } else {
            Box::new(h.meta.iter().copied())
        };
        let mut voted = BTreeSet::new();
        for i in idx {
            for r in &h.batches[i] {
                match &r.kind {
                    RecordKind::Updates => apply(&mut v, &r.ops),
                    RecordKind::VoteYes { .. } => {
                        if !voted.insert(r.txn) {
                            continue;
                        }
                        if !h.decisions.contains_key(&r.txn) {
                            v.pending.insert(r.txn);
                            for op in &r.ops {
                                if let WriteOp::GTable { granule, .. } = op {
                                    v.in_doubt.insert(*granule);
                                }
                            }
                        }
                        if h.marks.get(&r.txn) == Some(&Mark::Yes) && self.verdict(r.txn) == Some(Verdict::Commit) {
                            apply(&mut v, &r.ops);
                        }
                    }
                    RecordKind::Decision(_) => {}
                }
            }
        }
        Some(v)
    }

    /// Members per the SysLog.
    pub fn members(&self) -> BTreeSet<NodeId> {
        self.view(LogId::SysLog, false).map(|v| v.members).unwrap_or_default()
    }

    /// Views of every live node log.
    pub fn node_views(&self, users: bool) -> BTreeMap<NodeId, LogView> {
        self.live
            .keys()
            .filter_map(|l| match l {
                LogId::NodeLog(n) => self.view(*l, users).map(|v| (*n, v)),
                LogId::SysLog => None,
            })
            .collect()
    }

    /// Nodes satisfying D1 for `g`: their own partition names themselves.
    pub fn owners_in(views: &BTreeMap<NodeId, LogView>, g: GranuleId) -> Vec<NodeId> {
        views
            .iter()
            .filter(|(n, v)| v.granules.get(&g) == Some(*n))
            .map(|(n, _)| *n)
            .collect()
    }

    /// Every user-write batch with its txn, per log, in order.
    pub fn user_updates(&self) -> Vec<(LogId, Lsn, TxnId, Vec<(Key, Value)>)> {
        let mut out = Vec::new();
        for (log, h) in self.live.iter().chain(self.archived.iter()) {
            for (i, b) in h.batches.iter().enumerate() {
                for r in b {
                    if r.kind != RecordKind::Updates {
                        continue;
                    }
                    let writes: Vec<(Key, Value)> = r
                        .ops
                        .iter()
                        .filter_map(|o| match o {
                            WriteOp::User { key, value: Some(v) } => Some((*key, *v)),
                            _ => None,
                        })
                        .collect();
                    if !writes.is_empty() {
                        out.push((*log, Lsn(i as u64 + 1), r.txn, writes));
                    }
                }
            }
        }
        out
    }
}
