//! MarlinCommit: one- and two-phase commit where a participant is either a
//! compute node or a bare log instance, fenced by conditional appends.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::log_store::{Batch, LogStore, StoreError};
use crate::state::{clear_meta_cache, LsnTracker, MetaCache};
use crate::types::{LogId, LogRecord, Lsn, NodeId, RecordKind, TxnId, Verdict, WriteOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Participant {
    /// Votes locally, then appends to its own log.
    Node(NodeId),
    /// The coordinator appends to this log directly.
    Log(LogId),
}

impl Participant {
    pub fn log(self) -> LogId {
        match self {
            Participant::Node(n) => LogId::NodeLog(n),
            Participant::Log(l) => l,
        }
    }
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Node(n) => write!(f, "{n}"),
            Participant::Log(l) => write!(f, "{l}"),
        }
    }
}

/// Writes per participant. Each participant's ops target state governed by
/// its log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSet(pub BTreeMap<Participant, Vec<WriteOp>>);

impl UpdateSet {
    pub fn participants(&self) -> Vec<Participant> {
        self.0.keys().copied().collect()
    }

    pub fn logs(&self) -> Vec<LogId> {
        self.0.keys().map(|p| p.log()).collect()
    }

    pub fn ops(&self, p: Participant) -> &[WriteOp] {
        self.0.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbortReason {
    LsnMismatch,
    VoteNo,
    /// A participant did not answer and an abort was logged on its behalf.
    ParticipantUnreachable,
    WrongNode(Option<NodeId>),
    NodeAlreadyExist,
    NodeNotExist,
    LockConflict,
    UnknownLog,
    UnmappedKey,
    /// The storage layer refused the append for lack of capacity.
    Throttled,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::WrongNode(Some(n)) => write!(f, "WrongNodeError({n})"),
            AbortReason::WrongNode(None) => write!(f, "WrongNodeError(?)"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnDecision {
    Commit,
    Abort(AbortReason),
}

impl TxnDecision {
    pub fn is_commit(self) -> bool {
        self == TxnDecision::Commit
    }

    pub fn verdict(self) -> Verdict {
        match self {
            TxnDecision::Commit => Verdict::Commit,
            TxnDecision::Abort(_) => Verdict::Abort,
        }
    }
}

/// The tracked H-LSN for `log`, initialized from the tail on first contact.
pub fn ensure_tracked(
    store: &LogStore,
    tracker: &mut LsnTracker,
    log: LogId,
) -> Result<Lsn, StoreError> {
    if let Some(l) = tracker.get(log) {
        return Ok(l);
    }
    let tail = store.tail(log)?;
    tracker.observe(log, tail);
    Ok(tail)
}

fn store_failure(
    err: StoreError,
    tracker: &mut LsnTracker,
    cache: &mut MetaCache,
    log: LogId,
) -> TxnDecision {
    match err {
        StoreError::Throttled(_) => TxnDecision::Abort(AbortReason::Throttled),
        _ => unknown_log(tracker, cache, log),
    }
}

fn unknown_log(tracker: &mut LsnTracker, cache: &mut MetaCache, log: LogId) -> TxnDecision {
    tracker.forget(log);
    clear_meta_cache(cache, log);
    clear_meta_cache(cache, LogId::SysLog);
    TxnDecision::Abort(AbortReason::UnknownLog)
}

/// Conditional append at the tracked H-LSN. Both branches move the tracker
/// to the tail the store reports; a failure also drops the cached image.
pub fn try_log(
    store: &LogStore,
    by: Option<NodeId>,
    tracker: &mut LsnTracker,
    cache: &mut MetaCache,
    log: LogId,
    records: Batch,
) -> TxnDecision {
    let target = match ensure_tracked(store, tracker, log) {
        Ok(t) => t,
        Err(_) => return unknown_log(tracker, cache, log),
    };
    match store.append_as(by, log, records, target) {
        Ok(r) if r.is_success() => {
            tracker.observe(log, r.lsn);
            TxnDecision::Commit
        }
        Ok(r) => {
            clear_meta_cache(cache, log);
            tracker.observe(log, r.lsn);
            TxnDecision::Abort(AbortReason::LsnMismatch)
        }
        Err(e) => store_failure(e, tracker, cache, log),
    }
}

/// A yes vote: refused if `txn` already has a decision on `log`, otherwise
/// `VoteYes` plus the staged ops go through [`try_log`].
#[allow(clippy::too_many_arguments)]
pub fn try_vote(
    store: &LogStore,
    by: Option<NodeId>,
    tracker: &mut LsnTracker,
    cache: &mut MetaCache,
    log: LogId,
    txn: TxnId,
    participants: &[LogId],
    ops: Vec<WriteOp>,
) -> TxnDecision {
    let target = match ensure_tracked(store, tracker, log) {
        Ok(t) => t,
        Err(_) => return unknown_log(tracker, cache, log),
    };
    match store.with_image(log, target, |img| img.decided.contains_key(&txn)) {
        Ok(true) => return TxnDecision::Abort(AbortReason::VoteNo),
        Ok(false) => {}
        Err(StoreError::UnknownLog(_)) => return unknown_log(tracker, cache, log),
        Err(_) => return TxnDecision::Abort(AbortReason::LsnMismatch),
    }
    let rec = LogRecord::vote_yes(txn, participants.to_vec(), ops);
    try_log(store, by, tracker, cache, log, vec![rec])
}

/// Read-only commit: succeeds iff the log has not moved past the tracker.
pub fn validate(
    store: &LogStore,
    tracker: &mut LsnTracker,
    cache: &mut MetaCache,
    log: LogId,
) -> TxnDecision {
    let target = match ensure_tracked(store, tracker, log) {
        Ok(t) => t,
        Err(_) => return unknown_log(tracker, cache, log),
    };
    match store.tail(log) {
        Ok(tail) if tail == target => TxnDecision::Commit,
        Ok(tail) => {
            clear_meta_cache(cache, log);
            tracker.observe(log, tail);
            TxnDecision::Abort(AbortReason::LsnMismatch)
        }
        Err(_) => unknown_log(tracker, cache, log),
    }
}

/// Appends a decision record at the current tail, retrying until it lands.
/// The tracker only advances when it was in sync, so a foreign append that
/// the caller has not yet observed still fences its next conditional append.
pub fn append_decision(
    store: &LogStore,
    by: Option<NodeId>,
    tracker: &mut LsnTracker,
    log: LogId,
    txn: TxnId,
    verdict: Verdict,
) -> Result<Lsn, StoreError> {
    loop {
        let tail = store.tail(log)?;
        let r = store.append_as(by, log, vec![LogRecord::decision(txn, verdict)], tail)?;
        if r.is_success() {
            if tracker.get(log) == Some(tail) {
                tracker.observe(log, r.lsn);
            }
            return Ok(r.lsn);
        }
    }
}

/// What a log says about `txn`: the earlier of its yes vote and any abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstOf {
    Yes,
    Abort,
    Nothing,
}

pub fn first_of(batches: &[Batch], txn: TxnId) -> FirstOf {
    for rec in batches.iter().flatten() {
        if rec.txn != txn {
            continue;
        }
        match rec.kind {
            RecordKind::VoteYes { .. } => return FirstOf::Yes,
            RecordKind::Decision(Verdict::Abort) => return FirstOf::Abort,
            _ => {}
        }
    }
    FirstOf::Nothing
}

/// The decision rule for a multi-participant transaction: committed iff every
/// participant log shows the yes vote before any abort. `None` while some
/// live log has neither.
pub fn decide_from_logs(store: &LogStore, txn: TxnId, participants: &[LogId]) -> Option<Verdict> {
    let mut undecided = false;
    for log in participants {
        let batches = store.batches_any(*log).unwrap_or_default();
        match first_of(&batches, txn) {
            FirstOf::Yes => {}
            FirstOf::Abort => return Some(Verdict::Abort),
            FirstOf::Nothing if !store.exists(*log) => return Some(Verdict::Abort),
            FirstOf::Nothing => undecided = true,
        }
    }
    (!undecided).then_some(Verdict::Commit)
}

/// Logs an abort for `txn` on `log` unless a yes vote is already there. The
/// check and the append share one conditional append, so an abort is never
/// placed behind a vote. Returns what the log says first afterwards.
pub fn abort_if_unvoted(store: &LogStore, by: Option<NodeId>, log: LogId, txn: TxnId) -> FirstOf {
    loop {
        let Some(batches) = store.batches_any(log) else {
            return FirstOf::Abort;
        };
        match first_of(&batches, txn) {
            FirstOf::Nothing => {}
            seen => return seen,
        }
        if !store.exists(log) {
            return FirstOf::Abort;
        }
        let target = Lsn(batches.len() as u64);
        let rec = vec![LogRecord::decision(txn, Verdict::Abort)];
        match store.append_as(by, log, rec, target) {
            Ok(r) if r.is_success() => return FirstOf::Abort,
            Ok(_) => continue,
            Err(_) => return FirstOf::Abort,
        }
    }
}

/// Termination for an in-doubt transaction. Logs that carry no vote get an
/// abort logged on their owner's behalf; the first-of rule then settles the
/// outcome.
pub fn resolve(store: &LogStore, by: Option<NodeId>, txn: TxnId, participants: &[LogId]) -> Verdict {
    if let Some(v) = decide_from_logs(store, txn, participants) {
        return v;
    }
    for log in participants {
        if abort_if_unvoted(store, by, *log, txn) == FirstOf::Abort {
            return Verdict::Abort;
        }
    }
    Verdict::Commit
}

/// Synchronous MarlinCommit run by `coordinator`. Log participants (and the
/// coordinator's own node) are voted directly; `remote_vote` is asked for any
/// other node participant and must return that node's vote outcome. Decision
/// records are appended to every voting log before returning.
#[allow(clippy::too_many_arguments)]
pub fn marlin_commit(
    store: &LogStore,
    coordinator: NodeId,
    tracker: &mut LsnTracker,
    cache: &mut MetaCache,
    txn: TxnId,
    updates: &UpdateSet,
    mut remote_vote: impl FnMut(NodeId, &[LogId], &[WriteOp]) -> TxnDecision,
) -> TxnDecision {
    let participants = updates.participants();
    let me = Some(coordinator);
    if let [only] = participants.as_slice() {
        let ops = updates.ops(*only).to_vec();
        return try_log(store, me, tracker, cache, only.log(), vec![LogRecord::updates(txn, ops)]);
    }
    let logs = updates.logs();
    let mut voted = Vec::new();
    let mut decision = TxnDecision::Commit;
    for p in &participants {
        let ops = updates.ops(*p).to_vec();
        let d = match p {
            Participant::Node(n) if *n != coordinator => remote_vote(*n, &logs, &ops),
            _ => try_vote(store, me, tracker, cache, p.log(), txn, &logs, ops),
        };
        if !d.is_commit() {
            decision = d;
            break;
        }
        voted.push(p.log());
    }
    for log in voted {
        let _ = append_decision(store, me, tracker, log, txn, decision.verdict());
    }
    decision
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GranuleEntry, GranuleId, KeyRange};

    fn user_write(v: i64) -> Batch {
        vec![LogRecord::updates(
            TxnId::external(v as u64),
            vec![WriteOp::User {
                key: 1,
                value: Some(v),
            }],
        )]
    }

    fn store(logs: &[LogId]) -> LogStore {
        let s = LogStore::new();
        for l in logs {
            s.create_log(*l).unwrap();
        }
        s
    }

    const N2: NodeId = NodeId(2);
    const N3: NodeId = NodeId(3);
    const G2: LogId = LogId::NodeLog(N2);
    const G3: LogId = LogId::NodeLog(N3);

    #[test]
    fn in_sync_tracker_commits_and_advances() {
        let s = store(&[G2]);
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        t.observe(G2, Lsn(0));
        assert!(try_log(&s, Some(N2), &mut t, &mut c, G2, user_write(1)).is_commit());
        assert_eq!(t.get(G2), Some(Lsn(1)));
    }

    #[test]
    fn stale_tracker_aborts_and_catches_up() {
        // A recovered node tracks LSN 1 on its log while the tail is 2.
        let s = store(&[G3]);
        s.append(G3, user_write(1), Lsn(0)).unwrap();
        s.append(G3, user_write(2), Lsn(1)).unwrap();
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        t.observe(G3, Lsn(1));
        c.gtable
            .insert(N3, crate::state::GTablePartition::new(N3));
        let d = try_log(&s, Some(N3), &mut t, &mut c, G3, user_write(3));
        assert_eq!(d, TxnDecision::Abort(AbortReason::LsnMismatch));
        assert_eq!(t.get(G3), Some(Lsn(2)));
        assert!(!c.is_valid(G3));
        assert_eq!(s.tail(G3).unwrap(), Lsn(2));
    }

    #[test]
    fn racing_syslog_writers_exactly_one_commits() {
        // Enumerate both serial orders of two TryLogs from the same H-LSN.
        for first in [0, 1] {
            let s = store(&[LogId::SysLog]);
            let mut trackers = [LsnTracker::default(), LsnTracker::default()];
            for t in &mut trackers {
                t.observe(LogId::SysLog, Lsn(0));
            }
            let mut commits = 0;
            for i in [first, 1 - first] {
                let mut c = MetaCache::default();
                if try_log(&s, None, &mut trackers[i], &mut c, LogId::SysLog, user_write(i as i64))
                    .is_commit()
                {
                    commits += 1;
                }
            }
            assert_eq!(commits, 1);
        }
    }

    #[test]
    fn unknown_log_aborts_and_clears_membership() {
        let s = store(&[]);
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        c.mtable = Some(Default::default());
        let d = try_log(&s, None, &mut t, &mut c, G3, user_write(1));
        assert_eq!(d, TxnDecision::Abort(AbortReason::UnknownLog));
        assert!(c.mtable.is_none());
    }

    fn migrate_ops(owner: NodeId) -> Vec<WriteOp> {
        vec![WriteOp::GTable {
            granule: GranuleId(3),
            entry: Some(GranuleEntry {
                range: KeyRange::new(200, 300),
                owner,
            }),
        }]
    }

    #[test]
    fn second_vote_failure_aborts_globally_and_voids_first() {
        let s = store(&[G2, G3]);
        s.append(G3, user_write(9), Lsn(0)).unwrap();
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        t.observe(G2, Lsn(0));
        t.observe(G3, Lsn(0)); // stale
        let mut u = UpdateSet::default();
        u.0.insert(Participant::Log(G2), migrate_ops(N2));
        u.0.insert(Participant::Log(G3), migrate_ops(N2));
        let txn = TxnId::external(7);
        let d = marlin_commit(&s, N2, &mut t, &mut c, txn, &u, |_, _, _| unreachable!());
        assert_eq!(d, TxnDecision::Abort(AbortReason::LsnMismatch));
        let recs = s.read_records(G2, Lsn(0)).unwrap();
        assert!(matches!(recs[0].kind, RecordKind::VoteYes { .. }));
        assert_eq!(recs[1].kind, RecordKind::Decision(Verdict::Abort));
        assert!(s.image(G2, Lsn(0)).unwrap().tables.gtable.is_empty());
    }

    #[test]
    fn two_log_commit_visible_on_both() {
        let s = store(&[G2, G3]);
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        let mut u = UpdateSet::default();
        u.0.insert(Participant::Log(G3), migrate_ops(N2));
        u.0.insert(Participant::Node(N2), migrate_ops(N2));
        let d = marlin_commit(&s, N2, &mut t, &mut c, TxnId::external(1), &u, |_, _, _| {
            unreachable!()
        });
        assert!(d.is_commit());
        for log in [G2, G3] {
            let img = s.image(log, Lsn(0)).unwrap();
            assert_eq!(img.tables.gtable[&GranuleId(3)].owner, N2);
        }
    }

    #[test]
    fn resolve_logs_abort_where_vote_missing() {
        let s = store(&[G2, G3]);
        let txn = TxnId::external(4);
        s.append(G2, vec![LogRecord::vote_yes(txn, vec![G2, G3], vec![])], Lsn(0))
            .unwrap();
        assert_eq!(decide_from_logs(&s, txn, &[G2, G3]), None);
        assert_eq!(resolve(&s, None, txn, &[G2, G3]), Verdict::Abort);
        // A late vote after the logged abort does not flip the outcome.
        s.append(G3, vec![LogRecord::vote_yes(txn, vec![G2, G3], vec![])], Lsn(1))
            .unwrap();
        assert_eq!(decide_from_logs(&s, txn, &[G2, G3]), Some(Verdict::Abort));
    }

    #[test]
    fn escape_abort_never_lands_behind_a_vote() {
        let s = store(&[G3]);
        let txn = TxnId::external(6);
        s.append(G3, vec![LogRecord::vote_yes(txn, vec![G3], vec![])], Lsn(0))
            .unwrap();
        assert_eq!(abort_if_unvoted(&s, None, G3, txn), FirstOf::Yes);
        assert_eq!(s.tail(G3).unwrap(), Lsn(1));
        assert_eq!(resolve(&s, None, txn, &[G3]), Verdict::Commit);
    }

    #[test]
    fn vote_refused_after_logged_abort() {
        let s = store(&[G3]);
        let txn = TxnId::external(5);
        let mut t = LsnTracker::default();
        append_decision(&s, None, &mut t, G3, txn, Verdict::Abort).unwrap();
        let mut c = MetaCache::default();
        let d = try_vote(&s, Some(N3), &mut t, &mut c, G3, txn, &[G3], vec![]);
        assert_eq!(d, TxnDecision::Abort(AbortReason::VoteNo));
    }

    #[test]
    fn decision_append_keeps_stale_tracker_stale() {
        let s = store(&[G3]);
        let mut t = LsnTracker::default();
        t.observe(G3, Lsn(0));
        s.append(G3, user_write(1), Lsn(0)).unwrap();
        append_decision(&s, None, &mut t, G3, TxnId::external(1), Verdict::Commit).unwrap();
        assert_eq!(t.get(G3), Some(Lsn(0)));
    }

    #[test]
    fn validate_detects_movement() {
        let s = store(&[G2]);
        let (mut t, mut c) = (LsnTracker::default(), MetaCache::default());
        assert!(validate(&s, &mut t, &mut c, G2).is_commit());
        s.append(G2, user_write(1), Lsn(0)).unwrap();
        assert_eq!(
            validate(&s, &mut t, &mut c, G2),
            TxnDecision::Abort(AbortReason::LsnMismatch)
        );
        assert_eq!(s.tail(G2).unwrap(), Lsn(1));
    }
}
