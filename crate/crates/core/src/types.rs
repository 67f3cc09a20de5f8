//! Identifiers and the on-log record format shared by every layer.

use std::fmt;

use serde::{Deserialize, Serialize};

/// User key. Keys live in a configured space `[0, K)`.
pub type Key = u64;

/// User row value.
pub type Value = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GranuleId(pub u32);

impl fmt::Display for GranuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

/// Log sequence number: the number of record batches in a log. `Lsn(0)` is
/// the empty log and the batch appended at tail `n` lands at `Lsn(n + 1)`.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Lsn(pub u64);

impl Lsn {
    pub const ZERO: Lsn = Lsn(0);

    pub fn next(self) -> Lsn {
        Lsn(self.0 + 1)
    }
}

impl fmt::Display for Lsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A log instance in the storage layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LogId {
    /// The shared membership log governing the MTable.
    SysLog,
    /// The per-node log carrying that node's user updates and its GTable partition.
    NodeLog(NodeId),
}

impl LogId {
    pub fn node(self) -> Option<NodeId> {
        match self {
            LogId::SysLog => None,
            LogId::NodeLog(n) => Some(n),
        }
    }
}

impl fmt::Display for LogId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogId::SysLog => write!(f, "SysLog"),
            LogId::NodeLog(n) => write!(f, "GLog{}", n.0),
        }
    }
}

/// Globally unique transaction id. `origin` 0 is reserved for ids minted
/// outside the cluster (clients, operators, bootstrap); otherwise it is the
/// minting node and `seq` embeds that node's incarnation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId {
    pub origin: u32,
    pub seq: u64,
}

impl TxnId {
    pub fn external(seq: u64) -> TxnId {
        TxnId { origin: 0, seq }
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}.{}", self.origin, self.seq)
    }
}

/// Half-open key interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyRange {
    pub lo: Key,
    pub hi: Key,
}

impl KeyRange {
    pub fn new(lo: Key, hi: Key) -> KeyRange {
        KeyRange { lo, hi }
    }

    pub fn contains(&self, key: Key) -> bool {
        self.lo <= key && key < self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.lo, self.hi)
    }
}

/// One GTable row: the granule's key range and the node it points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GranuleEntry {
    pub range: KeyRange,
    pub owner: NodeId,
}

/// A single row mutation. `None` values are tombstones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WriteOp {
    MTable {
        node: NodeId,
        address: Option<String>,
    },
    GTable {
        granule: GranuleId,
        entry: Option<GranuleEntry>,
    },
    User {
        key: Key,
        value: Option<Value>,
    },
}

impl WriteOp {
    pub fn row_key(&self) -> RowKey {
        match self {
            WriteOp::MTable { node, .. } => RowKey::Member(*node),
            WriteOp::GTable { granule, .. } => RowKey::Granule(*granule),
            WriteOp::User { key, .. } => RowKey::User(*key),
        }
    }
}

/// Addresses a row inside one log's materialized image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowKey {
    Member(NodeId),
    Granule(GranuleId),
    User(Key),
}

/// Materialized row contents returned by page reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowValue {
    Member { address: String },
    Granule(GranuleEntry),
    User(Value),
}

/// Which system or user table a page read targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableRef {
    MTable,
    GTable(NodeId),
    User(NodeId),
}

impl TableRef {
    pub fn log(self) -> LogId {
        match self {
            TableRef::MTable => LogId::SysLog,
            TableRef::GTable(n) | TableRef::User(n) => LogId::NodeLog(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Commit,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    /// Updates that apply at their own position (one-phase commit).
    Updates,
    /// A participant's yes vote with its staged updates. Carries the full
    /// participant log list so any node can run the termination rule.
    VoteYes { participants: Vec<LogId> },
    /// Final outcome of a multi-participant transaction.
    Decision(Verdict),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogRecord {
    pub txn: TxnId,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<WriteOp>,
}

impl LogRecord {
    pub fn updates(txn: TxnId, ops: Vec<WriteOp>) -> LogRecord {
        LogRecord {
            txn,
            kind: RecordKind::Updates,
            ops,
        }
    }

    pub fn vote_yes(txn: TxnId, participants: Vec<LogId>, ops: Vec<WriteOp>) -> LogRecord {
        LogRecord {
            txn,
            kind: RecordKind::VoteYes { participants },
            ops,
        }
    }

    pub fn decision(txn: TxnId, verdict: Verdict) -> LogRecord {
        LogRecord {
            txn,
            kind: RecordKind::Decision(verdict),
            ops: Vec::new(),
        }
    }
}

/// The static granule layout: every granule and the key range it covers.
/// Granules never split or merge, so this is fixed for a cluster's lifetime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranuleLayout {
    ranges: Vec<(GranuleId, KeyRange)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("granule {0} has an empty range")]
    EmptyRange(GranuleId),
    #[error("granules {0} and {1} overlap")]
    Overlap(GranuleId, GranuleId),
    #[error("duplicate granule id {0}")]
    Duplicate(GranuleId),
}

impl GranuleLayout {
    pub fn new(mut ranges: Vec<(GranuleId, KeyRange)>) -> Result<GranuleLayout, LayoutError> {
        ranges.sort_by_key(|(_, r)| (r.lo, r.hi));
        let mut ids = std::collections::BTreeSet::new();
        for (g, r) in &ranges {
            if r.is_empty() {
                return Err(LayoutError::EmptyRange(*g));
            }
            if !ids.insert(*g) {
                return Err(LayoutError::Duplicate(*g));
            }
        }
        for w in ranges.windows(2) {
            if w[0].1.hi > w[1].1.lo {
                return Err(LayoutError::Overlap(w[0].0, w[1].0));
            }
        }
        Ok(GranuleLayout { ranges })
    }

    /// `count` equal-width granules `G1..=Gcount` over `[0, key_space)`.
    pub fn uniform(count: u32, key_space: Key) -> GranuleLayout {
        assert!(count > 0 && key_space >= count as Key);
        let width = key_space / count as Key;
        let ranges = (0..count)
            .map(|i| {
                let lo = i as Key * width;
                let hi = if i + 1 == count { key_space } else { lo + width };
                (GranuleId(i + 1), KeyRange::new(lo, hi))
            })
            .collect();
        GranuleLayout::new(ranges).expect("uniform layout is a partition")
    }

    /// Granule covering `key`, by binary search over the sorted ranges.
    pub fn granule_of(&self, key: Key) -> Option<GranuleId> {
        let idx = self.ranges.partition_point(|(_, r)| r.hi <= key);
        self.ranges
            .get(idx)
            .filter(|(_, r)| r.contains(key))
            .map(|(g, _)| *g)
    }

    pub fn range_of(&self, granule: GranuleId) -> Option<KeyRange> {
        self.ranges
            .iter()
            .find(|(g, _)| *g == granule)
            .map(|(_, r)| *r)
    }

    pub fn granules(&self) -> impl Iterator<Item = GranuleId> + '_ {
        self.ranges.iter().map(|(g, _)| *g)
    }

    pub fn ranges(&self) -> &[(GranuleId, KeyRange)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// True when the ranges tile `[0, key_space)` with no gaps.
    pub fn covers(&self, key_space: Key) -> bool {
        let mut next = 0;
        for (_, r) in &self.ranges {
            if r.lo != next {
                return false;
            }
            next = r.hi;
        }
        next == key_space
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_layout_tiles_key_space() {
        let layout = GranuleLayout::uniform(4, 400);
        assert!(layout.covers(400));
        assert_eq!(layout.granule_of(0), Some(GranuleId(1)));
        assert_eq!(layout.granule_of(100), Some(GranuleId(2)));
        assert_eq!(layout.granule_of(399), Some(GranuleId(4)));
        assert_eq!(layout.granule_of(400), None);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let err = GranuleLayout::new(vec![
            (GranuleId(1), KeyRange::new(0, 10)),
            (GranuleId(2), KeyRange::new(5, 20)),
        ])
        .unwrap_err();
        assert_eq!(err, LayoutError::Overlap(GranuleId(1), GranuleId(2)));
    }

    #[test]
    fn gap_leaves_key_unmapped() {
        let layout = GranuleLayout::new(vec![
            (GranuleId(1), KeyRange::new(0, 10)),
            (GranuleId(2), KeyRange::new(20, 30)),
        ])
        .unwrap();
        assert_eq!(layout.granule_of(15), None);
        assert!(!layout.covers(30));
    }
}
