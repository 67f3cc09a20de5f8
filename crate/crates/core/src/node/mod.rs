//! The compute node as a message-driven state machine.
//!
//! A node owns its caches, tracker and locks. Every input is handled in one
//! step that performs at most one commit-path log append; multi-append work
//! is split into self-addressed messages so a scheduler can interleave other
//! nodes between them.

pub mod locks;
pub mod msg;
mod txn;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::commit::{self, ensure_tracked, AbortReason, Participant, TxnDecision};
use crate::log_store::{LogStore, StoreError};
use crate::state::{GTablePartition, LsnTracker, MTable, MetaCache};
use crate::types::{GranuleId, GranuleLayout, Key, LogId, Lsn, NodeId, TxnId, Value, Verdict, WriteOp};

use locks::LockTable;
pub use msg::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatConfig {
    pub k: usize,
    pub period: u64,
    pub miss_threshold: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> HeartbeatConfig {
        HeartbeatConfig {
            k: 1,
            period: 5,
            miss_threshold: 3,
        }
    }
}

/// Where a detector sends the granules of a failed node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPolicy {
    #[default]
    RoundRobin,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub vote_timeout: u64,
    pub decision_timeout: u64,
    /// Arms vote and decision timers. Without them a silent participant
    /// blocks its coordinator forever.
    pub timeouts: bool,
    pub heartbeat: Option<HeartbeatConfig>,
    pub recovery_policy: RecoveryPolicy,
    /// Post-migration read burst against the source.
    pub warmup: bool,
    /// Ablation: GTable rows live in the SysLog and migrations commit there.
    pub centralized: bool,
    /// Seeded bug: transactions skip the ownership guard and the granule
    /// locks that back it.
    pub skip_guard: bool,
}

impl Default for NodeConfig {
    fn default() -> NodeConfig {
        NodeConfig {
            vote_timeout: 10,
            decision_timeout: 20,
            timeouts: true,
            heartbeat: Some(HeartbeatConfig::default()),
            recovery_policy: RecoveryPolicy::RoundRobin,
            warmup: false,
            centralized: false,
            skip_guard: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    Start,
    ReadSrc,
    Voting,
    LocalVote,
    Scanning,
    Finishing,
}

/// A transaction this node coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Coord {
    env: TxnEnvelope,
    client: Option<(Endpoint, u64)>,
    phase: Phase,
    participants: Vec<Participant>,
    /// Logs holding a yes vote, with the vote's LSN.
    votes: BTreeMap<LogId, Lsn>,
    decision: Option<TxnDecision>,
    /// Decision records still to be written, by log.
    unlogged: BTreeSet<LogId>,
    /// Node participants that have not acknowledged the decision.
    acks: BTreeSet<NodeId>,
    reads: Vec<(Key, Option<Value>)>,
    writes: Vec<(Key, Value)>,
    scans: BTreeMap<NodeId, (Lsn, Vec<(GranuleId, crate::types::GranuleEntry)>)>,
    syslog_at: Lsn,
}

impl Coord {
    fn new(env: TxnEnvelope, client: Option<(Endpoint, u64)>) -> Coord {
        Coord {
            env,
            client,
            phase: Phase::Start,
            participants: Vec::new(),
            votes: BTreeMap::new(),
            decision: None,
            unlogged: BTreeSet::new(),
            acks: BTreeSet::new(),
            reads: Vec::new(),
            writes: Vec::new(),
            scans: BTreeMap::new(),
            syslog_at: Lsn::ZERO,
        }
    }

    fn logs(&self) -> Vec<LogId> {
        self.participants.iter().map(|p| p.log()).collect()
    }
}

/// A transaction this node voted yes on and awaits a decision for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Voted {
    coordinator: NodeId,
    participants: Vec<LogId>,
    lsn: Lsn,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct FailoverJob {
    inflight: Option<TxnId>,
}

/// Volatile node state, lost on crash.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct Volatile {
    tracker: LsnTracker,
    cache: MetaCache,
    locks: LockTable,
    seq: u64,
    coord: BTreeMap<TxnId, Coord>,
    voted: BTreeMap<TxnId, Voted>,
    misses: BTreeMap<NodeId, u32>,
    failovers: BTreeMap<NodeId, FailoverJob>,
    retired: bool,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub incarnation: u32,
    cfg: Arc<NodeConfig>,
    layout: Arc<GranuleLayout>,
    st: Volatile,
}

pub enum Input {
    Msg { from: Endpoint, msg: Msg },
    Timer(TimerKind),
}

impl Node {
    /// Starts (or restarts) a node: trackers come from current tails and any
    /// vote left undecided on the node's own log is resolved.
    pub fn boot(
        id: NodeId,
        incarnation: u32,
        cfg: Arc<NodeConfig>,
        layout: Arc<GranuleLayout>,
        store: &LogStore,
        fx: &mut Effects,
    ) -> Node {
        let mut node = Node {
            id,
            incarnation,
            cfg,
            layout,
            st: Volatile::default(),
        };
        let own = node.own_log();
        if ensure_tracked(store, &mut node.st.tracker, own).is_err() {
            node.st.retired = true;
            return node;
        }
        let _ = ensure_tracked(store, &mut node.st.tracker, LogId::SysLog);
        node.resolve_own_pending(store, fx);
        let _ = node.mtable(store);
        let _ = node.own_partition(store);
        if let Some(hb) = node.cfg.heartbeat {
            fx.timer(hb.period, TimerKind::HeartbeatTick);
        }
        node
    }

    pub fn own_log(&self) -> LogId {
        LogId::NodeLog(self.id)
    }

    pub fn is_retired(&self) -> bool {
        self.st.retired
    }

    pub fn tracker(&self) -> &LsnTracker {
        &self.st.tracker
    }

    pub fn cache(&self) -> &MetaCache {
        &self.st.cache
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    /// True when the node holds no locks and runs no transactions.
    pub fn is_idle(&self) -> bool {
        self.st.coord.is_empty() && self.st.voted.is_empty() && self.st.locks.is_empty()
    }

    /// Suspects this node is still failing over.
    pub fn failover_jobs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.st.failovers.keys().copied()
    }

    pub fn active_txns(&self) -> usize {
        self.st.coord.len() + self.st.voted.len()
    }

    /// Hashes the state a scheduler needs to tell executions apart.
    pub fn fingerprint<H: std::hash::Hasher>(&self, h: &mut H) {
        use std::hash::Hash;
        self.id.hash(h);
        self.incarnation.hash(h);
        self.st.hash(h);
    }

    fn mint(&mut self) -> TxnId {
        self.st.seq += 1;
        TxnId {
            origin: self.id.0,
            seq: ((self.incarnation as u64) << 32) | self.st.seq,
        }
    }

    pub fn handle(&mut self, now: u64, input: Input, store: &LogStore, fx: &mut Effects) {
        if self.st.retired {
            return;
        }
        if !store.exists(self.own_log()) {
            self.st.retired = true;
            fx.note(format!("{} retired: own log deleted", self.id));
            return;
        }
        match input {
            Input::Msg { from, msg } => self.on_msg(now, from, msg, store, fx),
            Input::Timer(t) => self.on_timer(now, t, store, fx),
        }
    }

    fn on_msg(&mut self, now: u64, from: Endpoint, msg: Msg, store: &LogStore, fx: &mut Effects) {
        let from_node = match from {
            Endpoint::Node(n) => Some(n),
            Endpoint::Client(_) => None,
        };
        match msg {
            Msg::Request { req, txn } => self.start(txn, Some((from, req)), store, fx),
            Msg::GTableRead { txn, granules } => {
                if let Some(src) = from_node {
                    self.on_gtable_read(src, txn, granules, store, fx)
                }
            }
            Msg::GTableReadResp { txn, rows } => self.on_gtable_read_resp(txn, rows, store, fx),
            Msg::VoteReq {
                txn,
                participants,
                ops,
                granules,
            } => {
                if let Some(c) = from_node {
                    self.on_vote_req(c, txn, participants, ops, granules, store, fx)
                }
            }
            Msg::VoteResp { txn, decision, lsn } => {
                if let Some(p) = from_node {
                    self.on_vote_resp(p, txn, decision, lsn, store, fx)
                }
            }
            Msg::Decision { txn, verdict } => {
                if let Some(c) = from_node {
                    self.on_decision(c, txn, verdict, store, fx)
                }
            }
            Msg::DecisionAck { txn } => {
                if let Some(p) = from_node {
                    self.on_decision_ack(p, txn, fx)
                }
            }
            Msg::ScanReq { txn } => {
                if let Some(c) = from_node {
                    self.on_scan_req(c, txn, store, fx)
                }
            }
            Msg::ScanResp { txn, snapshot } => {
                if let Some(p) = from_node {
                    self.on_scan_resp(p, txn, snapshot, store, fx)
                }
            }
            Msg::Heartbeat => fx.send(from, Msg::HeartbeatAck),
            Msg::HeartbeatAck => {
                if let Some(p) = from_node {
                    self.st.misses.insert(p, 0);
                }
            }
            Msg::WarmupReq { granules } => {
                let rows = self.rows_of(store, self.own_log(), &granules).len();
                fx.send(from, Msg::WarmupResp { rows });
            }
            Msg::WarmupResp { .. } => {}
            Msg::RunRecovery { suspect, granules } => {
                let id = self.mint();
                let env = TxnEnvelope {
                    id,
                    kind: TxnKind::RecoveryMigr {
                        granules,
                        src: suspect,
                        dst: self.id,
                    },
                };
                self.start(env, None, store, fx);
            }
            Msg::LocalVote { txn } => self.on_local_vote(txn, store, fx),
            Msg::LogVote { txn, log } => self.on_log_vote(txn, log, store, fx),
            Msg::LogDecision { txn, log } => self.on_log_decision(txn, log, store, fx),
            Msg::UserCommit { txn } => self.on_user_commit(txn, store, fx),
            Msg::Reply { .. } => {}
        }
        let _ = now;
    }

    fn on_timer(&mut self, now: u64, t: TimerKind, store: &LogStore, fx: &mut Effects) {
        match t {
            TimerKind::HeartbeatTick => self.on_heartbeat_tick(store, fx),
            TimerKind::VoteTimeout(txn) => self.on_vote_timeout(txn, store, fx),
            TimerKind::DecisionTimeout(txn) => self.on_decision_timeout(txn, store, fx),
            TimerKind::FailoverPoll(s) => self.on_failover_poll(now, s, store, fx),
        }
    }

    // ---- cache access -------------------------------------------------

    fn self_endpoint(&self) -> Endpoint {
        Endpoint::Node(self.id)
    }

    fn step(&self, fx: &mut Effects, msg: Msg) {
        fx.send(self.self_endpoint(), msg);
    }

    /// The cached MTable, refetched at the tracked SysLog LSN when invalid.
    fn mtable(&mut self, store: &LogStore) -> Result<MTable, StoreError> {
        if let Some(m) = &self.st.cache.mtable {
            return Ok(m.clone());
        }
        let at = ensure_tracked(store, &mut self.st.tracker, LogId::SysLog)?;
        let m = store.with_image(LogId::SysLog, at, |img| MTable::from_image(&img.tables))?;
        self.st.cache.mtable = Some(m.clone());
        Ok(m)
    }

    /// This node's GTable partition, refetched when invalid.
    fn own_partition(&mut self, store: &LogStore) -> Result<GTablePartition, StoreError> {
        if let Some(p) = self.st.cache.gtable.get(&self.id) {
            return Ok(p.clone());
        }
        let log = self.own_log();
        let at = ensure_tracked(store, &mut self.st.tracker, log)?;
        let p = read_partition(store, self.id, at)?;
        self.st.cache.gtable.insert(self.id, p.clone());
        Ok(p)
    }

    fn invalidate_own(&mut self) {
        self.st.cache.clear(self.own_log());
    }

    /// User rows of `granules` in `log`'s current image.
    fn rows_of(&self, store: &LogStore, log: LogId, granules: &[GranuleId]) -> Vec<(Key, Value)> {
        let ranges: Vec<_> = granules
            .iter()
            .filter_map(|g| self.layout.range_of(*g))
            .collect();
        store
            .with_image(log, Lsn::ZERO, |img| {
                ranges
                    .iter()
                    .flat_map(|r| img.tables.users.range(r.lo..r.hi).map(|(k, v)| (*k, *v)))
                    .collect()
            })
            .unwrap_or_default()
    }

    // ---- decisions ----------------------------------------------------

    /// Fixes the coordinator's decision, reports it, and schedules the
    /// decision records for every log that holds a yes vote.
    fn decide(&mut self, txn: TxnId, decision: TxnDecision, fx: &mut Effects) {
        let me = self.id;
        let own = self.own_log();
        let Some(c) = self.st.coord.get_mut(&txn) else {
            return;
        };
        c.decision = Some(decision);
        c.phase = Phase::Finishing;
        let verdict = decision.verdict();
        let mut positions: Vec<(LogId, Lsn)> = Vec::new();
        if decision.is_commit() {
            positions = c.votes.iter().map(|(l, n)| (*l, *n)).collect();
        }
        let multi = c.participants.len() > 1;
        let voted: Vec<LogId> = c.votes.keys().copied().collect();
        let mut steps = Vec::new();
        let mut sends = Vec::new();
        if multi {
            for log in voted {
                let remote = c
                    .participants
                    .iter()
                    .find(|p| p.log() == log)
                    .and_then(|p| match p {
                        Participant::Node(n) if *n != me => Some(*n),
                        _ => None,
                    });
                match remote {
                    Some(n) => {
                        c.acks.insert(n);
                        sends.push((Endpoint::Node(n), Msg::Decision { txn, verdict }));
                    }
                    None => {
                        c.unlogged.insert(log);
                        steps.push(Msg::LogDecision { txn, log });
                    }
                }
            }
        }
        let outcome = Outcome {
            txn,
            tag: c.env.kind.tag(),
            coordinator: me,
            decision,
            positions,
            writes: if decision.is_commit() {
                c.writes.clone()
            } else {
                Vec::new()
            },
            granules: match &c.env.kind {
                TxnKind::Migration { granules, .. } | TxnKind::RecoveryMigr { granules, .. } => {
                    granules.clone()
                }
                _ => Vec::new(),
            },
        };
        let mut result: TxnResult = decision.into();
        if let TxnResult::Committed { reads, owners } = &mut result {
            *reads = c.reads.clone();
            *owners = c
                .scans
                .iter()
                .flat_map(|(n, (_, es))| {
                    es.iter()
                        .filter(move |(_, e)| e.owner == *n)
                        .map(|(g, e)| (*g, e.owner))
                })
                .collect();
            owners.sort();
        }
        if let Some((ep, req)) = c.client {
            sends.push((ep, Msg::Reply { req, txn, result }));
        }
        let warm = match (&c.env.kind, decision.is_commit() && self.cfg.warmup) {
            (TxnKind::Migration { granules, src, .. }, true) => Some((*src, granules.clone())),
            _ => None,
        };
        fx.outcomes.push(outcome);
        for (to, m) in sends {
            fx.send(to, m);
        }
        for m in steps {
            self.step(fx, m);
        }
        if let Some((src, granules)) = warm {
            fx.send(Endpoint::Node(src), Msg::WarmupReq { granules });
        }
        if let Some(c) = self.st.coord.get(&txn) {
            if !c.acks.is_empty() && self.cfg.timeouts {
                fx.timer(self.cfg.decision_timeout, TimerKind::DecisionTimeout(txn));
            }
        }
        let _ = own;
        self.maybe_finish(txn);
    }

    fn maybe_finish(&mut self, txn: TxnId) {
        let done = self
            .st
            .coord
            .get(&txn)
            .is_some_and(|c| c.decision.is_some() && c.unlogged.is_empty() && c.acks.is_empty());
        if done {
            self.st.coord.remove(&txn);
            self.st.locks.release_all(txn);
        }
    }

    fn on_log_decision(&mut self, txn: TxnId, log: LogId, store: &LogStore, fx: &mut Effects) {
        let Some(verdict) = self
            .st
            .coord
            .get(&txn)
            .and_then(|c| c.decision)
            .map(|d| d.verdict())
        else {
            return;
        };
        let by = Some(self.id);
        let _ = commit::append_decision(store, by, &mut self.st.tracker, log, txn, verdict);
        if log == self.own_log() {
            self.invalidate_own();
        } else {
            self.st.cache.clear(log);
        }
        if let Some(c) = self.st.coord.get_mut(&txn) {
            c.unlogged.remove(&log);
        }
        if log == self.own_log() {
            self.st.locks.release_all(txn);
        }
        fx.note(format!("{txn} decision {verdict:?} logged on {log}"));
        self.maybe_finish(txn);
    }

    fn on_decision(&mut self, coordinator: NodeId, txn: TxnId, verdict: Verdict, store: &LogStore, fx: &mut Effects) {
        let own = self.own_log();
        let pending = store
            .with_image(own, Lsn::ZERO, |img| img.pending.contains_key(&txn))
            .unwrap_or(false);
        if pending {
            let _ = commit::append_decision(store, Some(self.id), &mut self.st.tracker, own, txn, verdict);
            self.invalidate_own();
        }
        self.st.voted.remove(&txn);
        self.st.locks.release_all(txn);
        fx.send(Endpoint::Node(coordinator), Msg::DecisionAck { txn });
    }

    fn on_decision_ack(&mut self, from: NodeId, txn: TxnId, _fx: &mut Effects) {
        if let Some(c) = self.st.coord.get_mut(&txn) {
            c.acks.remove(&from);
        }
        self.maybe_finish(txn);
    }

    /// Decision timer: a participant resolves its in-doubt vote from the
    /// logs; a coordinator writes decisions for unacknowledging participants.
    fn on_decision_timeout(&mut self, txn: TxnId, store: &LogStore, fx: &mut Effects) {
        if let Some(v) = self.st.voted.get(&txn).cloned() {
            let verdict = commit::resolve(store, Some(self.id), txn, &v.participants);
            let own = self.own_log();
            let pending = store
                .with_image(own, Lsn::ZERO, |img| img.pending.contains_key(&txn))
                .unwrap_or(false);
            if pending {
                let _ = commit::append_decision(store, Some(self.id), &mut self.st.tracker, own, txn, verdict);
                self.invalidate_own();
            }
            self.st.voted.remove(&txn);
            self.st.locks.release_all(txn);
            fx.note(format!("{} resolved {txn} as {verdict:?}", self.id));
        }
        let Some(c) = self.st.coord.get(&txn).cloned() else {
            return;
        };
        let Some(d) = c.decision else {
            return;
        };
        for n in &c.acks {
            let log = LogId::NodeLog(*n);
            let pending = store
                .with_image(log, Lsn::ZERO, |img| img.pending.contains_key(&txn))
                .unwrap_or(false);
            if pending {
                let _ = commit::append_decision(store, Some(self.id), &mut self.st.tracker, log, txn, d.verdict());
            }
        }
        if let Some(c) = self.st.coord.get_mut(&txn) {
            c.acks.clear();
        }
        self.maybe_finish(txn);
    }

    /// Settles every undecided vote on this node's own log.
    fn resolve_own_pending(&mut self, store: &LogStore, fx: &mut Effects) {
        let own = self.own_log();
        let pending: Vec<(TxnId, Vec<LogId>)> = store
            .with_image(own, Lsn::ZERO, |img| {
                img.pending
                    .iter()
                    .map(|(t, p)| (*t, p.participants.clone()))
                    .collect()
            })
            .unwrap_or_default();
        for (txn, participants) in pending {
            let verdict = commit::resolve(store, Some(self.id), txn, &participants);
            let _ = commit::append_decision(store, Some(self.id), &mut self.st.tracker, own, txn, verdict);
            fx.note(format!("{} resolved {txn} as {verdict:?} on restart", self.id));
        }
        self.invalidate_own();
    }

    // ---- failure detection and failover --------------------------------

    fn on_heartbeat_tick(&mut self, store: &LogStore, fx: &mut Effects) {
        let Some(hb) = self.cfg.heartbeat else {
            return;
        };
        fx.timer(hb.period, TimerKind::HeartbeatTick);
        let ring = match store.with_image(LogId::SysLog, Lsn::ZERO, |img| MTable::from_image(&img.tables)) {
            Ok(m) => m,
            Err(_) => return,
        };
        if !ring.contains(self.id) {
            return;
        }
        let succ = ring.successors(self.id, hb.k);
        self.st.misses.retain(|n, _| succ.contains(n));
        for s in succ {
            let missed = self.st.misses.entry(s).or_default();
            if *missed >= hb.miss_threshold && !self.st.failovers.contains_key(&s) {
                fx.note(format!("{} suspects {s} after {missed} missed heartbeats", self.id));
                self.st.failovers.insert(s, FailoverJob { inflight: None });
                fx.timer(0, TimerKind::FailoverPoll(s));
            }
            *self.st.misses.entry(s).or_default() += 1;
            fx.send(Endpoint::Node(s), Msg::Heartbeat);
        }
    }

    /// Starts a failover job for `suspect` regardless of heartbeat state.
    pub fn suspect(&mut self, suspect: NodeId, fx: &mut Effects) {
        if suspect != self.id && !self.st.failovers.contains_key(&suspect) {
            self.st.failovers.insert(suspect, FailoverJob { inflight: None });
            fx.timer(0, TimerKind::FailoverPoll(suspect));
        }
    }

    fn on_failover_poll(&mut self, _now: u64, suspect: NodeId, store: &LogStore, fx: &mut Effects) {
        let Some(job) = self.st.failovers.get(&suspect).cloned() else {
            return;
        };
        let log = LogId::NodeLog(suspect);
        if !store.exists(log) {
            self.st.failovers.remove(&suspect);
            fx.note(format!("{} finished failover of {suspect}", self.id));
            return;
        }
        let period = self.cfg.heartbeat.map(|h| h.period).unwrap_or(5);
        fx.timer(period, TimerKind::FailoverPoll(suspect));
        if job.inflight.is_some_and(|t| self.st.coord.contains_key(&t)) {
            return;
        }
        // Settle the suspect's undecided votes before reading its partition.
        let pending: Vec<(TxnId, Vec<LogId>)> = store
            .with_image(log, Lsn::ZERO, |img| {
                img.pending
                    .iter()
                    .map(|(t, p)| (*t, p.participants.clone()))
                    .collect()
            })
            .unwrap_or_default();
        let me = Some(self.id);
        for (txn, participants) in &pending {
            let v = commit::resolve(store, me, *txn, participants);
            let _ = commit::append_decision(store, me, &mut self.st.tracker, log, *txn, v);
        }
        let owned: Vec<GranuleId> = store
            .with_image(log, Lsn::ZERO, |img| {
                img.tables
                    .gtable
                    .iter()
                    .filter(|(_, e)| e.owner == suspect)
                    .map(|(g, _)| *g)
                    .collect()
            })
            .unwrap_or_default();
        let id = if !owned.is_empty() {
            match self.cfg.recovery_policy {
                RecoveryPolicy::Detector => {
                    self.start_internal(TxnKind::RecoveryMigr { granules: owned, src: suspect, dst: self.id }, store, fx)
                }
                RecoveryPolicy::RoundRobin => {
                    let ring = self.mtable(store).unwrap_or_default();
                    let survivors: Vec<NodeId> = ring.members().filter(|n| *n != suspect).collect();
                    if survivors.is_empty() {
                        return;
                    }
                    let mut plan: BTreeMap<NodeId, Vec<GranuleId>> = BTreeMap::new();
                    for (i, g) in owned.iter().enumerate() {
                        plan.entry(survivors[i % survivors.len()]).or_default().push(*g);
                    }
                    let mut local = None;
                    for (dst, granules) in plan {
                        if dst == self.id {
                            local = self.start_internal(TxnKind::RecoveryMigr { granules, src: suspect, dst }, store, fx);
                        } else {
                            fx.send(Endpoint::Node(dst), Msg::RunRecovery { suspect, granules });
                        }
                    }
                    local
                }
            }
        } else {
            self.start_internal(TxnKind::DeleteNode { node: suspect }, store, fx)
        };
        if let Some(job) = self.st.failovers.get_mut(&suspect) {
            job.inflight = id;
        }
    }

    fn start_internal(&mut self, kind: TxnKind, store: &LogStore, fx: &mut Effects) -> Option<TxnId> {
        let id = self.mint();
        self.start(TxnEnvelope { id, kind }, None, store, fx);
        Some(id)
    }
}

/// A node's partition as materialized from its log at or after `at`.
pub fn read_partition(store: &LogStore, node: NodeId, at: Lsn) -> Result<GTablePartition, StoreError> {
    store.with_image(LogId::NodeLog(node), at, |img| GTablePartition {
        owner_view: node,
        entries: img.tables.gtable.clone(),
        in_doubt: img.in_doubt_granules(),
    })
}

fn gtable_op(g: GranuleId, range: crate::types::KeyRange, owner: NodeId) -> WriteOp {
    WriteOp::GTable {
        granule: g,
        entry: Some(crate::types::GranuleEntry { range, owner }),
    }
}

fn abort(reason: AbortReason) -> TxnDecision {
    TxnDecision::Abort(reason)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::log_store::AppendMode;
    use crate::sim::cluster::{Bootstrap, Cluster};

    /// Delivers every message in FIFO order, ignoring timers, and returns
    /// the replies clients received.
    fn pump(c: &mut Cluster, mut q: VecDeque<(Endpoint, NodeId, Msg)>) -> Vec<(u64, TxnResult)> {
        let mut replies = Vec::new();
        while let Some((from, to, msg)) = q.pop_front() {
            let Some(fx) = c.deliver(0, to, Input::Msg { from, msg }) else {
                continue;
            };
            for (dst, m) in fx.sends {
                match (dst, m) {
                    (Endpoint::Node(n), m) => q.push_back((Endpoint::Node(to), n, m)),
                    (Endpoint::Client(_), Msg::Reply { req, result, .. }) => replies.push((req, result)),
                    _ => {}
                }
            }
        }
        replies
    }

    fn cluster() -> Cluster {
        let cfg = NodeConfig {
            heartbeat: None,
            ..NodeConfig::default()
        };
        let boot = Bootstrap::round_robin(&[NodeId(1), NodeId(2)], 2, 200);
        Cluster::new(&boot, cfg, AppendMode::Conditional).0
    }

    fn request(req: u64, to: u32, kind: TxnKind) -> VecDeque<(Endpoint, NodeId, Msg)> {
        let txn = TxnEnvelope {
            id: TxnId::external(req),
            kind,
        };
        VecDeque::from([(Endpoint::Client(1), NodeId(to), Msg::Request { req, txn })])
    }

    fn write(key: Key) -> TxnKind {
        TxnKind::User {
            ops: vec![UserOp::Write(key, 7)],
        }
    }

    #[test]
    fn owner_commits_a_user_write() {
        let mut c = cluster();
        let r = pump(&mut c, request(1, 1, write(5)));
        assert!(matches!(r[..], [(1, TxnResult::Committed { .. })]), "{r:?}");
        assert_eq!(c.store.tail(LogId::NodeLog(NodeId(1))).unwrap(), Lsn(2));
    }

    #[test]
    fn non_owner_rejects_without_a_hint() {
        // N2 never held G1, so it cannot name the owner.
        let mut c = cluster();
        let r = pump(&mut c, request(1, 2, write(5)));
        assert_eq!(r, vec![(1, TxnResult::Aborted(AbortReason::WrongNode(None)))]);
    }

    #[test]
    fn migration_moves_the_guard() {
        let mut c = cluster();
        let m = TxnKind::Migration {
            granules: vec![GranuleId(1)],
            src: NodeId(1),
            dst: NodeId(2),
        };
        let r = pump(&mut c, request(1, 2, m));
        assert!(matches!(r[..], [(1, TxnResult::Committed { .. })]), "{r:?}");
        let r = pump(&mut c, request(2, 1, write(5)));
        assert_eq!(r, vec![(2, TxnResult::Aborted(AbortReason::WrongNode(Some(NodeId(2)))))]);
        let r = pump(&mut c, request(3, 2, write(5)));
        assert!(matches!(r[..], [(3, TxnResult::Committed { .. })]), "{r:?}");
        assert!(c.node(NodeId(1)).unwrap().is_idle());
        assert!(c.node(NodeId(2)).unwrap().is_idle());
    }

    #[test]
    fn migration_from_a_non_owner_aborts() {
        let mut c = cluster();
        let m = TxnKind::Migration {
            granules: vec![GranuleId(2)],
            src: NodeId(1),
            dst: NodeId(2),
        };
        let r = pump(&mut c, request(1, 2, m));
        assert!(matches!(r[..], [(1, TxnResult::Aborted(_))]), "{r:?}");
    }

    #[test]
    fn add_node_commits_once() {
        let mut c = cluster();
        c.spawn(NodeId(3)).unwrap();
        let add = || TxnKind::AddNode {
            node: NodeId(3),
            address: "n3".into(),
        };
        let r = pump(&mut c, request(1, 1, add()));
        assert!(matches!(r[..], [(1, TxnResult::Committed { .. })]), "{r:?}");
        let r = pump(&mut c, request(2, 2, add()));
        assert!(matches!(r[..], [(2, TxnResult::Aborted(_))]), "{r:?}");
    }
}
