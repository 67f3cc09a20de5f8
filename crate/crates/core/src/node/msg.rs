//! Transactions, wire messages, timers and step effects of the node runtime.

use serde::{Deserialize, Serialize};

use crate::commit::TxnDecision;
use crate::types::{GranuleEntry, GranuleId, Key, LogId, Lsn, NodeId, TxnId, Value, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UserOp {
    Read(Key),
    Write(Key, Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnKind {
    User { ops: Vec<UserOp> },
    AddNode { node: NodeId, address: String },
    DeleteNode { node: NodeId },
    Migration { granules: Vec<GranuleId>, src: NodeId, dst: NodeId },
    RecoveryMigr { granules: Vec<GranuleId>, src: NodeId, dst: NodeId },
    ScanGTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxnTag {
    User,
    AddNode,
    DeleteNode,
    Migration,
    RecoveryMigr,
    ScanGTable,
}

impl TxnTag {
    pub const ALL: [TxnTag; 6] = [
        TxnTag::User,
        TxnTag::AddNode,
        TxnTag::DeleteNode,
        TxnTag::Migration,
        TxnTag::RecoveryMigr,
        TxnTag::ScanGTable,
    ];

    pub fn is_reconfiguration(self) -> bool {
        !matches!(self, TxnTag::User | TxnTag::ScanGTable)
    }

    pub fn name(self) -> &'static str {
        match self {
            TxnTag::User => "user",
            TxnTag::AddNode => "add_node",
            TxnTag::DeleteNode => "delete_node",
            TxnTag::Migration => "migration",
            TxnTag::RecoveryMigr => "recovery_migr",
            TxnTag::ScanGTable => "scan_gtable",
        }
    }
}

impl TxnKind {
    pub fn tag(&self) -> TxnTag {
        match self {
            TxnKind::User { .. } => TxnTag::User,
            TxnKind::AddNode { .. } => TxnTag::AddNode,
            TxnKind::DeleteNode { .. } => TxnTag::DeleteNode,
            TxnKind::Migration { .. } => TxnTag::Migration,
            TxnKind::RecoveryMigr { .. } => TxnTag::RecoveryMigr,
            TxnKind::ScanGTable => TxnTag::ScanGTable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxnEnvelope {
    pub id: TxnId,
    pub kind: TxnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnResult {
    Committed {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        reads: Vec<(Key, Option<Value>)>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        owners: Vec<(GranuleId, NodeId)>,
    },
    Aborted(crate::commit::AbortReason),
}

impl TxnResult {
    pub fn committed() -> TxnResult {
        TxnResult::Committed {
            reads: Vec::new(),
            owners: Vec::new(),
        }
    }

    pub fn is_committed(&self) -> bool {
        matches!(self, TxnResult::Committed { .. })
    }
}

impl From<TxnDecision> for TxnResult {
    fn from(d: TxnDecision) -> TxnResult {
        match d {
            TxnDecision::Commit => TxnResult::committed(),
            TxnDecision::Abort(r) => TxnResult::Aborted(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Node(NodeId),
    Client(u32),
}

/// An ownership row as seen by the source during a migration read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OwnerView {
    pub granule: GranuleId,
    pub owner: Option<NodeId>,
    pub in_doubt: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Msg {
    Request { req: u64, txn: TxnEnvelope },
    Reply { req: u64, txn: TxnId, result: TxnResult },
    GTableRead { txn: TxnId, granules: Vec<GranuleId> },
    GTableReadResp { txn: TxnId, rows: Vec<OwnerView> },
    VoteReq {
        txn: TxnId,
        participants: Vec<LogId>,
        ops: Vec<crate::types::WriteOp>,
        granules: Vec<GranuleId>,
    },
    VoteResp { txn: TxnId, decision: TxnDecision, lsn: Option<Lsn> },
    Decision { txn: TxnId, verdict: Verdict },
    DecisionAck { txn: TxnId },
    ScanReq { txn: TxnId },
    ScanResp {
        txn: TxnId,
        snapshot: Option<(Lsn, Vec<(GranuleId, GranuleEntry)>)>,
    },
    Heartbeat,
    HeartbeatAck,
    WarmupReq { granules: Vec<GranuleId> },
    WarmupResp { rows: usize },
    RunRecovery { suspect: NodeId, granules: Vec<GranuleId> },
    /// Self-addressed steps: each performs at most one log append.
    LocalVote { txn: TxnId },
    LogVote { txn: TxnId, log: LogId },
    LogDecision { txn: TxnId, log: LogId },
    UserCommit { txn: TxnId },
}

impl Msg {
    pub fn name(&self) -> &'static str {
        match self {
            Msg::Request { .. } => "Request",
            Msg::Reply { .. } => "Reply",
            Msg::GTableRead { .. } => "GTableRead",
            Msg::GTableReadResp { .. } => "GTableReadResp",
            Msg::VoteReq { .. } => "VoteReq",
            Msg::VoteResp { .. } => "VoteResp",
            Msg::Decision { .. } => "Decision",
            Msg::DecisionAck { .. } => "DecisionAck",
            Msg::ScanReq { .. } => "ScanReq",
            Msg::ScanResp { .. } => "ScanResp",
            Msg::Heartbeat => "Heartbeat",
            Msg::HeartbeatAck => "HeartbeatAck",
            Msg::WarmupReq { .. } => "WarmupReq",
            Msg::WarmupResp { .. } => "WarmupResp",
            Msg::RunRecovery { .. } => "RunRecovery",
            Msg::LocalVote { .. } => "LocalVote",
            Msg::LogVote { .. } => "LogVote",
            Msg::LogDecision { .. } => "LogDecision",
            Msg::UserCommit { .. } => "UserCommit",
        }
    }

    pub fn is_heartbeat(&self) -> bool {
        matches!(self, Msg::Heartbeat | Msg::HeartbeatAck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimerKind {
    HeartbeatTick,
    VoteTimeout(TxnId),
    DecisionTimeout(TxnId),
    FailoverPoll(NodeId),
}

/// A coordinator's final word on a transaction it ran.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub txn: TxnId,
    pub tag: TxnTag,
    pub coordinator: NodeId,
    pub decision: TxnDecision,
    /// Where the transaction's payload landed, per log, when committed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<(LogId, Lsn)>,
    /// Committed user writes, in op order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub writes: Vec<(Key, Value)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub granules: Vec<GranuleId>,
}

/// Everything a node step asks of its environment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub sends: Vec<(Endpoint, Msg)>,
    pub timers: Vec<(u64, TimerKind)>,
    pub outcomes: Vec<Outcome>,
    pub notes: Vec<String>,
}

impl Effects {
    pub fn send(&mut self, to: Endpoint, msg: Msg) {
        self.sends.push((to, msg));
    }

    pub fn timer(&mut self, delay: u64, kind: TimerKind) {
        self.timers.push((delay, kind));
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty()
            && self.timers.is_empty()
            && self.outcomes.is_empty()
            && self.notes.is_empty()
    }
}
