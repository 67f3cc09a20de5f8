//! Per-kind transaction logic: user transactions and the reconfiguration
//! transactions (add/delete node, migration, recovery migration, scan).

use std::collections::BTreeMap;

use super::locks::{LockKey, LockMode};
use super::*;
use crate::commit::{abort_if_unvoted, try_log, try_vote, validate, FirstOf};
use crate::types::{GranuleEntry, LogRecord};

impl Node {
    pub(super) fn start(
        &mut self,
        env: TxnEnvelope,
        client: Option<(Endpoint, u64)>,
        store: &LogStore,
        fx: &mut Effects,
    ) {
        let txn = env.id;
        if self.st.coord.contains_key(&txn) {
            return;
        }
        let kind = env.kind.clone();
        self.st.coord.insert(txn, Coord::new(env, client));
        let early = match kind {
            TxnKind::User { ops } => self.start_user(txn, ops, store, fx),
            TxnKind::AddNode { node, address } => Some(self.run_add_node(txn, node, address, store)),
            TxnKind::DeleteNode { node } => Some(self.run_delete_node(txn, node, store, fx)),
            TxnKind::Migration { granules, src, dst } if self.cfg.centralized => {
                Some(self.run_central_migration(txn, granules, src, dst, store))
            }
            TxnKind::Migration { granules, src, dst } => self.start_migration(txn, granules, src, dst, store, fx),
            TxnKind::RecoveryMigr { granules, src, dst } => self.start_recovery(txn, granules, src, dst, store, fx),
            TxnKind::ScanGTable => self.start_scan(txn, store, fx),
        };
        if let Some(d) = early {
            self.decide(txn, d, fx);
        }
    }

    // ---- user transactions ---------------------------------------------

    fn start_user(&mut self, txn: TxnId, ops: Vec<UserOp>, store: &LogStore, fx: &mut Effects) -> Option<TxnDecision> {
        let part = match self.own_partition(store) {
            Ok(p) => p,
            Err(_) => return Some(abort(AbortReason::UnknownLog)),
        };
        let mut locks = Vec::new();
        let mut granules = Vec::new();
        for op in &ops {
            let (UserOp::Read(k) | UserOp::Write(k, _)) = op;
            let Some(g) = self.layout.granule_of(*k) else {
                return Some(abort(AbortReason::UnmappedKey));
            };
            if !granules.contains(&g) {
                granules.push(g);
            }
            let mode = match op {
                UserOp::Read(_) => LockMode::Shared,
                UserOp::Write(..) => LockMode::Exclusive,
            };
            locks.push((LockKey::Key(*k), mode));
        }
        if !self.cfg.skip_guard {
            for g in &granules {
                if !part.owns(*g) {
                    let hint = part.entries.get(g).map(|e| e.owner).filter(|o| *o != self.id);
                    return Some(abort(AbortReason::WrongNode(hint)));
                }
                if part.in_doubt.contains(g) {
                    return Some(abort(AbortReason::LockConflict));
                }
            }
        }
        let mut reqs: Vec<_> = granules.iter().map(|g| (LockKey::Granule(*g), LockMode::Shared)).collect();
        reqs.extend(locks);
        if !self.st.locks.acquire_all(&reqs, txn) {
            return Some(abort(AbortReason::LockConflict));
        }
        let own = self.own_log();
        let at = self.st.tracker.get(own).unwrap_or_default();
        let image_users = store
            .with_image(own, at, |img| img.tables.users.clone())
            .unwrap_or_default();
        let mut local: BTreeMap<Key, Value> = BTreeMap::new();
        let c = self.st.coord.get_mut(&txn).expect("registered");
        for op in ops {
            match op {
                UserOp::Read(k) => {
                    let v = local.get(&k).or_else(|| image_users.get(&k)).copied();
                    c.reads.push((k, v));
                }
                UserOp::Write(k, v) => {
                    local.insert(k, v);
                    c.writes.push((k, v));
                }
            }
        }
        c.participants = vec![Participant::Node(self.id)];
        self.step(fx, Msg::UserCommit { txn });
        None
    }

    pub(super) fn on_user_commit(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        let Some(c) = self.st.coord.get(&txn) else {
            return;
        };
        let own = self.own_log();
        let by = Some(self.id);
        let d = if c.writes.is_empty() {
            validate(store, &mut self.st.tracker, &mut self.st.cache, own)
        } else {
            let ops = c
                .writes
                .iter()
                .map(|(k, v)| WriteOp::User { key: *k, value: Some(*v) })
                .collect();
            let d = try_log(store, by, &mut self.st.tracker, &mut self.st.cache, own, vec![LogRecord::updates(txn, ops)]);
            if d.is_commit() {
                let at = self.st.tracker.get(own).unwrap_or_default();
                if let Some(c) = self.st.coord.get_mut(&txn) {
                    c.votes.insert(own, at);
                }
            }
            d
        };
        if !d.is_commit() {
            let cache = if self.st.cache.is_valid(own) { "kept" } else { "invalidated" };
            fx.note(format!("{} user {txn} aborted at commit: {d:?}; cache of {own} {cache}", self.id));
        }
        self.decide(txn, d, fx);
    }

    // ---- membership --------------------------------------------------------

    fn run_add_node(&mut self, txn: TxnId, node: NodeId, address: String, store: &LogStore) -> TxnDecision {
        let m = match self.mtable(store) {
            Ok(m) => m,
            Err(_) => return abort(AbortReason::UnknownLog),
        };
        if m.contains(node) {
            return abort(AbortReason::NodeAlreadyExist);
        }
        let rec = LogRecord::updates(txn, vec![WriteOp::MTable { node, address: Some(address) }]);
        self.syslog_commit(txn, rec, store)
    }

    fn run_delete_node(&mut self, txn: TxnId, node: NodeId, store: &LogStore, fx: &mut Effects) -> TxnDecision {
        let m = match self.mtable(store) {
            Ok(m) => m,
            Err(_) => return abort(AbortReason::UnknownLog),
        };
        if !m.contains(node) {
            return abort(AbortReason::NodeNotExist);
        }
        // The departing partition must be empty and settled.
        let log = LogId::NodeLog(node);
        let busy = store
            .with_image(log, Lsn::ZERO, |img| {
                !img.pending.is_empty() || img.tables.gtable.values().any(|e| e.owner == node)
            })
            .unwrap_or(false);
        if busy {
            return abort(AbortReason::VoteNo);
        }
        let rec = LogRecord::updates(txn, vec![WriteOp::MTable { node, address: None }]);
        let d = self.syslog_commit(txn, rec, store);
        if d.is_commit() && store.delete_log(log).is_ok() {
            self.st.tracker.forget(log);
            self.st.cache.clear(log);
            fx.note(format!("{} deleted {log}", self.id));
        }
        d
    }

    fn syslog_commit(&mut self, txn: TxnId, rec: LogRecord, store: &LogStore) -> TxnDecision {
        let by = Some(self.id);
        let d = try_log(store, by, &mut self.st.tracker, &mut self.st.cache, LogId::SysLog, vec![rec]);
        if d.is_commit() {
            self.st.cache.clear(LogId::SysLog);
            let at = self.st.tracker.get(LogId::SysLog).unwrap_or_default();
            if let Some(c) = self.st.coord.get_mut(&txn) {
                c.participants = vec![Participant::Log(LogId::SysLog)];
                c.votes.insert(LogId::SysLog, at);
            }
        }
        d
    }

    // ---- live migration ----------------------------------------------------

    fn lock_for_migration(&mut self, txn: TxnId, granules: &[GranuleId], store: &LogStore) -> Option<TxnDecision> {
        if self.cfg.skip_guard {
            return None;
        }
        let part = match self.own_partition(store) {
            Ok(p) => p,
            Err(_) => return Some(abort(AbortReason::UnknownLog)),
        };
        if granules.iter().any(|g| part.in_doubt.contains(g)) {
            return Some(abort(AbortReason::LockConflict));
        }
        let reqs: Vec<_> = granules.iter().map(|g| (LockKey::Granule(*g), LockMode::Exclusive)).collect();
        if !self.st.locks.acquire_all(&reqs, txn) {
            return Some(abort(AbortReason::LockConflict));
        }
        None
    }

    fn start_migration(
        &mut self,
        txn: TxnId,
        granules: Vec<GranuleId>,
        src: NodeId,
        dst: NodeId,
        store: &LogStore,
        fx: &mut Effects,
    ) -> Option<TxnDecision> {
        if dst != self.id || src == dst || granules.is_empty() {
            return Some(abort(AbortReason::VoteNo));
        }
        let m = match self.mtable(store) {
            Ok(m) => m,
            Err(_) => return Some(abort(AbortReason::UnknownLog)),
        };
        if !m.contains(src) || !m.contains(dst) {
            return Some(abort(AbortReason::NodeNotExist));
        }
        if let Some(d) = self.lock_for_migration(txn, &granules, store) {
            return Some(d);
        }
        let c = self.st.coord.get_mut(&txn).expect("registered");
        c.participants = vec![Participant::Node(src), Participant::Node(dst)];
        c.phase = Phase::ReadSrc;
        fx.send(Endpoint::Node(src), Msg::GTableRead { txn, granules });
        if self.cfg.timeouts {
            fx.timer(self.cfg.vote_timeout, TimerKind::VoteTimeout(txn));
        }
        None
    }

    pub(super) fn on_gtable_read(&mut self, from: NodeId, txn: TxnId, granules: Vec<GranuleId>, store: &LogStore, fx: &mut Effects) {
        let Ok(part) = self.own_partition(store) else {
            return;
        };
        let rows = granules
            .into_iter()
            .map(|g| OwnerView {
                granule: g,
                owner: part.entries.get(&g).map(|e| e.owner),
                in_doubt: part.in_doubt.contains(&g),
            })
            .collect();
        fx.send(Endpoint::Node(from), Msg::GTableReadResp { txn, rows });
    }

    pub(super) fn on_gtable_read_resp(&mut self, txn: TxnId, rows: Vec<OwnerView>, _store: &LogStore, fx: &mut Effects) {
        let Some(c) = self.st.coord.get_mut(&txn) else {
            return;
        };
        if c.phase != Phase::ReadSrc {
            return;
        }
        let TxnKind::Migration { granules, src, dst } = c.env.kind.clone() else {
            return;
        };
        for row in rows.iter().filter(|_| !self.cfg.skip_guard) {
            if row.owner != Some(src) {
                return self.decide(txn, abort(AbortReason::WrongNode(row.owner)), fx);
            }
            if row.in_doubt {
                return self.decide(txn, abort(AbortReason::LockConflict), fx);
            }
        }
        let participants = c.logs();
        c.phase = Phase::Voting;
        let ops = self.ownership_ops(&granules, dst);
        fx.send(
            Endpoint::Node(src),
            Msg::VoteReq { txn, participants, ops, granules },
        );
    }

    fn ownership_ops(&self, granules: &[GranuleId], owner: NodeId) -> Vec<WriteOp> {
        granules
            .iter()
            .filter_map(|g| self.layout.range_of(*g).map(|r| gtable_op(*g, r, owner)))
            .collect()
    }

    /// Source-side vote: guard, exclusive granule locks, then the conditional
    /// append of the vote with the staged partition change.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn on_vote_req(
        &mut self,
        coordinator: NodeId,
        txn: TxnId,
        participants: Vec<LogId>,
        ops: Vec<WriteOp>,
        granules: Vec<GranuleId>,
        store: &LogStore,
        fx: &mut Effects,
    ) {
        let reply = |fx: &mut Effects, decision, lsn| {
            fx.send(Endpoint::Node(coordinator), Msg::VoteResp { txn, decision, lsn });
        };
        if let Some(v) = self.st.voted.get(&txn) {
            return reply(fx, TxnDecision::Commit, Some(v.lsn));
        }
        let part = match self.own_partition(store) {
            Ok(p) => p,
            Err(_) => return reply(fx, abort(AbortReason::UnknownLog), None),
        };
        let guarded = !self.cfg.skip_guard;
        for g in granules.iter().filter(|_| guarded) {
            if !part.owns(*g) {
                let hint = part.entries.get(g).map(|e| e.owner);
                return reply(fx, abort(AbortReason::WrongNode(hint)), None);
            }
            if part.in_doubt.contains(g) {
                return reply(fx, abort(AbortReason::LockConflict), None);
            }
        }
        let reqs: Vec<_> = granules.iter().map(|g| (LockKey::Granule(*g), LockMode::Exclusive)).collect();
        if guarded && !self.st.locks.acquire_all(&reqs, txn) {
            return reply(fx, abort(AbortReason::LockConflict), None);
        }
        let own = self.own_log();
        let d = try_vote(store, Some(self.id), &mut self.st.tracker, &mut self.st.cache, own, txn, &participants, ops);
        if d.is_commit() {
            self.invalidate_own();
            let lsn = self.st.tracker.get(own).unwrap_or_default();
            self.st.voted.insert(txn, Voted { coordinator, participants, lsn });
            if self.cfg.timeouts {
                fx.timer(self.cfg.decision_timeout, TimerKind::DecisionTimeout(txn));
            }
            reply(fx, d, Some(lsn));
        } else {
            self.st.locks.release_all(txn);
            reply(fx, d, None);
        }
    }

    pub(super) fn on_vote_resp(&mut self, from: NodeId, txn: TxnId, decision: TxnDecision, lsn: Option<Lsn>, store: &LogStore, fx: &mut Effects) {
        let Some(c) = self.st.coord.get_mut(&txn) else {
            return;
        };
        if c.phase != Phase::Voting {
            return;
        }
        if !decision.is_commit() {
            return self.decide(txn, decision, fx);
        }
        c.votes.insert(LogId::NodeLog(from), lsn.unwrap_or_default());
        c.phase = Phase::LocalVote;
        self.local_vote(txn, store, fx);
    }

    /// Vote timer: the coordinator votes on behalf of a silent participant
    /// by logging an abort on its log, unless its yes vote is already there.
    pub(super) fn on_vote_timeout(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        let Some(c) = self.st.coord.get(&txn) else {
            return;
        };
        match c.phase {
            Phase::ReadSrc => self.decide(txn, abort(AbortReason::ParticipantUnreachable), fx),
            Phase::Voting => {
                let TxnKind::Migration { src, .. } = c.env.kind else {
                    return;
                };
                let log = LogId::NodeLog(src);
                match abort_if_unvoted(store, Some(self.id), log, txn) {
                    FirstOf::Yes => {
                        let lsn = vote_position(store, log, txn);
                        let c = self.st.coord.get_mut(&txn).expect("present");
                        c.votes.insert(log, lsn);
                        c.phase = Phase::LocalVote;
                        fx.note(format!("{txn}: vote of {src} read from its log"));
                        self.local_vote(txn, store, fx);
                    }
                    _ => {
                        fx.note(format!("{txn}: logged abort on {log} for silent {src}"));
                        self.decide(txn, abort(AbortReason::ParticipantUnreachable), fx);
                    }
                }
            }
            Phase::Scanning => self.decide(txn, abort(AbortReason::ParticipantUnreachable), fx),
            _ => {}
        }
    }

    /// Destination vote: the staged partition change plus a copy of the
    /// granules' user rows read from the source's log.
    pub(super) fn on_local_vote(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        if self.st.coord.get(&txn).is_some_and(|c| c.phase == Phase::LocalVote) {
            self.local_vote(txn, store, fx);
        }
    }

    fn local_vote(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        let c = self.st.coord.get(&txn).expect("present");
        let (granules, src) = match &c.env.kind {
            TxnKind::Migration { granules, src, .. } | TxnKind::RecoveryMigr { granules, src, .. } => (granules.clone(), *src),
            _ => return,
        };
        let participants = c.logs();
        let mut ops = self.ownership_ops(&granules, self.id);
        ops.extend(
            self.rows_of(store, LogId::NodeLog(src), &granules)
                .into_iter()
                .map(|(k, v)| WriteOp::User { key: k, value: Some(v) }),
        );
        let own = self.own_log();
        let d = try_vote(store, Some(self.id), &mut self.st.tracker, &mut self.st.cache, own, txn, &participants, ops);
        self.invalidate_own();
        if d.is_commit() {
            let lsn = self.st.tracker.get(own).unwrap_or_default();
            self.st.coord.get_mut(&txn).expect("present").votes.insert(own, lsn);
        }
        self.decide(txn, d, fx);
    }

    // ---- recovery migration ------------------------------------------------

    fn start_recovery(
        &mut self,
        txn: TxnId,
        granules: Vec<GranuleId>,
        src: NodeId,
        dst: NodeId,
        store: &LogStore,
        fx: &mut Effects,
    ) -> Option<TxnDecision> {
        if dst != self.id || src == dst || granules.is_empty() {
            return Some(abort(AbortReason::VoteNo));
        }
        let src_log = LogId::NodeLog(src);
        let Ok(at) = ensure_tracked(store, &mut self.st.tracker, src_log) else {
            return Some(abort(AbortReason::UnknownLog));
        };
        let Ok(part) = read_partition(store, src, at) else {
            return Some(abort(AbortReason::UnknownLog));
        };
        for g in granules.iter().filter(|_| !self.cfg.skip_guard) {
            if !part.owns(*g) {
                return Some(abort(AbortReason::WrongNode(part.entries.get(g).map(|e| e.owner))));
            }
            if part.in_doubt.contains(g) {
                return Some(abort(AbortReason::LockConflict));
            }
        }
        if let Some(d) = self.lock_for_migration(txn, &granules, store) {
            return Some(d);
        }
        let c = self.st.coord.get_mut(&txn).expect("registered");
        c.participants = vec![Participant::Log(src_log), Participant::Node(dst)];
        c.phase = Phase::Voting;
        self.step(fx, Msg::LogVote { txn, log: src_log });
        None
    }

    /// The coordinator's conditional append on a log participant.
    pub(super) fn on_log_vote(&mut self, txn: TxnId, log: LogId, store: &LogStore, fx: &mut Effects) {
        let Some(c) = self.st.coord.get(&txn) else {
            return;
        };
        if c.phase != Phase::Voting {
            return;
        }
        let TxnKind::RecoveryMigr { granules, .. } = &c.env.kind else {
            return;
        };
        let participants = c.logs();
        let ops = self.ownership_ops(granules, self.id);
        let d = try_vote(store, Some(self.id), &mut self.st.tracker, &mut self.st.cache, log, txn, &participants, ops);
        if !d.is_commit() {
            return self.decide(txn, d, fx);
        }
        let lsn = self.st.tracker.get(log).unwrap_or_default();
        let c = self.st.coord.get_mut(&txn).expect("present");
        c.votes.insert(log, lsn);
        c.phase = Phase::LocalVote;
        self.step(fx, Msg::LocalVote { txn });
    }

    // ---- centralized ablation ----------------------------------------------

    fn run_central_migration(&mut self, txn: TxnId, granules: Vec<GranuleId>, src: NodeId, dst: NodeId, store: &LogStore) -> TxnDecision {
        let Ok(at) = ensure_tracked(store, &mut self.st.tracker, LogId::SysLog) else {
            return abort(AbortReason::UnknownLog);
        };
        let owners = store
            .with_image(LogId::SysLog, at, |img| {
                granules.iter().map(|g| img.tables.gtable.get(g).map(|e| e.owner)).collect::<Vec<_>>()
            })
            .unwrap_or_default();
        if let Some(o) = owners.iter().find(|o| **o != Some(src)) {
            return abort(AbortReason::WrongNode(*o));
        }
        let rec = LogRecord::updates(txn, self.ownership_ops(&granules, dst));
        self.syslog_commit(txn, rec, store)
    }

    // ---- ownership scan ------------------------------------------------------

    fn start_scan(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) -> Option<TxnDecision> {
        let m = match self.mtable(store) {
            Ok(m) => m,
            Err(_) => return Some(abort(AbortReason::UnknownLog)),
        };
        let syslog_at = self.st.tracker.get(LogId::SysLog).unwrap_or_default();
        let members: Vec<NodeId> = m.members().collect();
        let mine = if members.contains(&self.id) {
            match self.scan_local(store) {
                Some(s) => Some(s),
                None => return Some(abort(AbortReason::VoteNo)),
            }
        } else {
            None
        };
        let c = self.st.coord.get_mut(&txn).expect("registered");
        c.syslog_at = syslog_at;
        c.participants = std::iter::once(Participant::Log(LogId::SysLog))
            .chain(members.iter().map(|n| Participant::Node(*n)))
            .collect();
        c.phase = Phase::Scanning;
        if let Some(s) = mine {
            c.scans.insert(self.id, s);
        }
        for n in &members {
            if *n != self.id {
                fx.send(Endpoint::Node(*n), Msg::ScanReq { txn });
            }
        }
        if self.cfg.timeouts {
            fx.timer(self.cfg.vote_timeout, TimerKind::VoteTimeout(txn));
        }
        self.maybe_finish_scan(txn, store, fx);
        None
    }

    /// This node's partition with the LSN it was read at, or `None` when a
    /// reconfiguration is in flight or the tracker is stale.
    fn scan_local(&mut self, store: &LogStore) -> Option<(Lsn, Vec<(GranuleId, GranuleEntry)>)> {
        let own = self.own_log();
        if !validate(store, &mut self.st.tracker, &mut self.st.cache, own).is_commit() {
            return None;
        }
        let at = self.st.tracker.get(own)?;
        let part = read_partition(store, self.id, at).ok()?;
        if !part.in_doubt.is_empty() {
            return None;
        }
        Some((at, part.entries.into_iter().collect()))
    }

    pub(super) fn on_scan_req(&mut self, from: NodeId, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        let snapshot = self.scan_local(store);
        fx.send(Endpoint::Node(from), Msg::ScanResp { txn, snapshot });
    }

    pub(super) fn on_scan_resp(
        &mut self,
        from: NodeId,
        txn: TxnId,
        snapshot: Option<(Lsn, Vec<(GranuleId, GranuleEntry)>)>,
        store: &LogStore,
        fx: &mut Effects,
    ) {
        let Some(c) = self.st.coord.get_mut(&txn) else {
            return;
        };
        if c.phase != Phase::Scanning {
            return;
        }
        match snapshot {
            None => self.decide(txn, abort(AbortReason::VoteNo), fx),
            Some(s) => {
                c.scans.insert(from, s);
                self.maybe_finish_scan(txn, store, fx);
            }
        }
    }

    /// Once every partition is in, certify the snapshot: no participant log
    /// (SysLog included) may have moved since it was read.
    fn maybe_finish_scan(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        let c = self.st.coord.get(&txn).expect("present");
        let nodes: Vec<NodeId> = c
            .participants
            .iter()
            .filter_map(|p| match p {
                Participant::Node(n) => Some(*n),
                _ => None,
            })
            .collect();
        if nodes.iter().any(|n| !c.scans.contains_key(n)) {
            return;
        }
        let unchanged = store.tail(LogId::SysLog).ok() == Some(c.syslog_at)
            && c
                .scans
                .iter()
                .all(|(n, (at, _))| store.tail(LogId::NodeLog(*n)).ok() == Some(*at));
        let d = if unchanged {
            TxnDecision::Commit
        } else {
            self.st.cache.clear(LogId::SysLog);
            abort(AbortReason::LsnMismatch)
        };
        self.decide(txn, d, fx);
    }
}

/// LSN of `txn`'s yes vote on `log`.
fn vote_position(store: &LogStore, log: LogId, txn: TxnId) -> Lsn {
    let batches = store.batches_any(log).unwrap_or_default();
    batches
        .iter()
        .position(|b| {
            b.iter()
                .any(|r| r.txn == txn && matches!(r.kind, crate::types::RecordKind::VoteYes { .. }))
        })
        .map(|i| Lsn(i as u64 + 1))
        .unwrap_or_default()
}
