//! Page materialization: the deterministic fold of one log into row images.
//!
//! Visibility rule: `Updates` records apply at their own position. A
//! `VoteYes` record's updates stay invisible until a `Decision(Commit)` for
//! the same transaction appears on the same log, and then apply at the vote's
//! position (so the log's vote order is the serialization order). The first
//! decision record for a transaction wins; a vote that trails an abort
//! decision is void.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::state::image::TableImage;
use crate::types::{GranuleId, LogId, LogRecord, Lsn, RecordKind, RowKey, TxnId, Verdict, WriteOp};

pub type Batch = Vec<LogRecord>;

/// A vote whose decision has not reached this log yet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PendingVote {
    pub position: Lsn,
    pub participants: Vec<LogId>,
    pub ops: Vec<WriteOp>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogImage {
    pub applied: Lsn,
    pub tables: TableImage,
    pub pending: BTreeMap<TxnId, PendingVote>,
    pub decided: BTreeMap<TxnId, Verdict>,
    last_write: BTreeMap<RowKey, Lsn>,
}

impl LogImage {
    /// Canonical two-pass fold of `batches` (LSN 1 first).
    pub fn fold(batches: &[Batch]) -> LogImage {
        let mut decided = BTreeMap::new();
        for rec in batches.iter().flatten() {
            if let RecordKind::Decision(v) = rec.kind {
                decided.entry(rec.txn).or_insert(v);
            }
        }
        let mut img = LogImage {
            decided,
            ..LogImage::default()
        };
        let mut seen_votes = BTreeSet::new();
        for (i, batch) in batches.iter().enumerate() {
            let pos = Lsn(i as u64 + 1);
            for rec in batch {
                match &rec.kind {
                    RecordKind::Updates => img.apply_at(pos, &rec.ops),
                    RecordKind::VoteYes { participants } => {
                        if !seen_votes.insert(rec.txn) {
                            continue;
                        }
                        match img.decided.get(&rec.txn) {
                            Some(Verdict::Commit) => img.apply_at(pos, &rec.ops),
                            Some(Verdict::Abort) => {}
                            None => {
                                img.pending.insert(
                                    rec.txn,
                                    PendingVote {
                                        position: pos,
                                        participants: participants.clone(),
                                        ops: rec.ops.clone(),
                                    },
                                );
                            }
                        }
                    }
                    RecordKind::Decision(_) => {}
                }
            }
        }
        img.applied = Lsn(batches.len() as u64);
        img
    }

    /// Replays `batches[applied..]` incrementally. Falls back to a full fold
    /// when a late commit decision would reorder already-applied writes.
    pub fn advance(&mut self, batches: &[Batch]) {
        while (self.applied.0 as usize) < batches.len() {
            let idx = self.applied.0 as usize;
            let pos = Lsn(idx as u64 + 1);
            if !self.apply_batch(pos, &batches[idx]) {
                *self = LogImage::fold(&batches[..=idx]);
            }
            self.applied = pos;
        }
    }

    /// Returns false when an exact incremental step is impossible.
    fn apply_batch(&mut self, pos: Lsn, batch: &Batch) -> bool {
        for rec in batch {
            match &rec.kind {
                RecordKind::Updates => self.apply_at(pos, &rec.ops),
                RecordKind::VoteYes { participants } => match self.decided.get(&rec.txn) {
                    Some(Verdict::Commit) => return false,
                    Some(Verdict::Abort) => {}
                    None => {
                        self.pending.entry(rec.txn).or_insert_with(|| PendingVote {
                            position: pos,
                            participants: participants.clone(),
                            ops: rec.ops.clone(),
                        });
                    }
                },
                RecordKind::Decision(v) => {
                    if self.decided.contains_key(&rec.txn) {
                        continue;
                    }
                    self.decided.insert(rec.txn, *v);
                    if let Some(p) = self.pending.remove(&rec.txn) {
                        if *v == Verdict::Commit {
                            let reordered = p
                                .ops
                                .iter()
                                .any(|op| self.last_write.get(&op.row_key()) > Some(&p.position));
                            if reordered {
                                return false;
                            }
                            self.apply_at(p.position, &p.ops);
                        }
                    }
                }
            }
        }
        true
    }

    fn apply_at(&mut self, pos: Lsn, ops: &[WriteOp]) {
        self.tables.apply_write_ops(ops);
        for op in ops {
            let slot = self.last_write.entry(op.row_key()).or_default();
            *slot = (*slot).max(pos);
        }
    }

    /// Granules with a staged GTable change awaiting a decision on this log.
    pub fn in_doubt_granules(&self) -> BTreeSet<GranuleId> {
        self.pending
            .values()
            .flat_map(|p| p.ops.iter())
            .filter_map(|op| match op {
                WriteOp::GTable { granule, .. } => Some(*granule),
                _ => None,
            })
            .collect()
    }
}

/// Update records that are visible on a log under the decision rule, with the
/// LSN at which each applies. Exposed for callers that need the raw order.
pub fn fold_decision(batches: &[Batch]) -> Vec<(Lsn, &LogRecord)> {
    let mut decided = BTreeMap::new();
    for rec in batches.iter().flatten() {
        if let RecordKind::Decision(v) = rec.kind {
            decided.entry(rec.txn).or_insert(v);
        }
    }
    let mut out = Vec::new();
    let mut seen_votes = BTreeSet::new();
    for (i, batch) in batches.iter().enumerate() {
        for rec in batch {
            let visible = match rec.kind {
                RecordKind::Updates => true,
                RecordKind::VoteYes { .. } => {
                    seen_votes.insert(rec.txn)
                        && decided.get(&rec.txn) == Some(&Verdict::Commit)
                }
                RecordKind::Decision(_) => false,
            };
            if visible {
                out.push((Lsn(i as u64 + 1), rec));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GranuleEntry, KeyRange, NodeId};

    fn t(n: u64) -> TxnId {
        TxnId::external(n)
    }

    fn user(k: u64, v: i64) -> WriteOp {
        WriteOp::User {
            key: k,
            value: Some(v),
        }
    }

    fn own(g: u32, n: u32) -> WriteOp {
        WriteOp::GTable {
            granule: GranuleId(g),
            entry: Some(GranuleEntry {
                range: KeyRange::new(0, 100),
                owner: NodeId(n),
            }),
        }
    }

    #[test]
    fn one_phase_record_visible_at_its_lsn() {
        let batches = vec![vec![LogRecord::updates(t(1), vec![user(5, 1)])]];
        let img = LogImage::fold(&batches);
        assert_eq!(img.tables.users[&5], 1);
        assert_eq!(fold_decision(&batches)[0].0, Lsn(1));
    }

    #[test]
    fn undecided_vote_is_invisible() {
        let batches = vec![vec![LogRecord::vote_yes(t(1), vec![], vec![own(1, 2)])]];
        let img = LogImage::fold(&batches);
        assert!(img.tables.gtable.is_empty());
        assert!(img.in_doubt_granules().contains(&GranuleId(1)));
        assert!(fold_decision(&batches).is_empty());
    }

    #[test]
    fn aborted_vote_stays_invisible() {
        let batches = vec![
            vec![LogRecord::vote_yes(t(1), vec![], vec![own(1, 2)])],
            vec![LogRecord::decision(t(1), Verdict::Abort)],
        ];
        let img = LogImage::fold(&batches);
        assert!(img.tables.gtable.is_empty());
        assert!(img.pending.is_empty());
    }

    #[test]
    fn late_commit_applies_at_vote_position() {
        // vote(t1: k=1), then a 1PC write k=2, then commit(t1): the 1PC write
        // is later in log order and must win.
        let batches = vec![
            vec![LogRecord::vote_yes(t(1), vec![], vec![user(7, 1)])],
            vec![LogRecord::updates(t(2), vec![user(7, 2)])],
            vec![LogRecord::decision(t(1), Verdict::Commit)],
        ];
        let mut inc = LogImage::default();
        for i in 1..=batches.len() {
            inc.advance(&batches[..i]);
        }
        assert_eq!(inc, LogImage::fold(&batches));
        assert_eq!(inc.tables.users[&7], 2);
    }
}
