//! Node-side system tables: MTable, GTable partitions, the meta cache and the
//! per-node LSN tracker.

pub mod image;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{GranuleEntry, GranuleId, GranuleLayout, Key, LogId, Lsn, NodeId};

pub use image::{apply_write_ops, TableImage};

/// Cluster membership: node id to address.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MTable {
    pub rows: BTreeMap<NodeId, String>,
}

impl MTable {
    pub fn from_image(image: &TableImage) -> MTable {
        MTable {
            rows: image.mtable.clone(),
        }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.rows.contains_key(&node)
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.rows.keys().copied()
    }

    /// The `k` ring successors of `node`, ordered by node id with wrap-around.
    pub fn successors(&self, node: NodeId, k: usize) -> Vec<NodeId> {
        let ring: Vec<NodeId> = self.rows.keys().copied().collect();
        if ring.is_empty() {
            return Vec::new();
        }
        let start = ring.partition_point(|n| *n <= node);
        (0..ring.len())
            .map(|i| ring[(start + i) % ring.len()])
            .filter(|n| *n != node)
            .take(k)
            .collect()
    }
}

/// One node's GTable partition, materialized from that node's log.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GTablePartition {
    pub owner_view: NodeId,
    pub entries: BTreeMap<GranuleId, GranuleEntry>,
    /// Granules with a staged change awaiting a decision on this log.
    pub in_doubt: BTreeSet<GranuleId>,
}

impl GTablePartition {
    pub fn new(owner_view: NodeId) -> GTablePartition {
        GTablePartition {
            owner_view,
            entries: BTreeMap::new(),
            in_doubt: BTreeSet::new(),
        }
    }

    /// Ownership in the sense of D1: the entry for `g` names this node.
    pub fn owns(&self, g: GranuleId) -> bool {
        self.entries.get(&g).map(|e| e.owner) == Some(self.owner_view)
    }

    pub fn owned(&self) -> impl Iterator<Item = GranuleId> + '_ {
        self.entries
            .iter()
            .filter(|(_, e)| e.owner == self.owner_view)
            .map(|(g, _)| *g)
    }

    /// Owned and not the subject of an undecided reconfiguration.
    pub fn capable(&self, g: GranuleId) -> bool {
        self.owns(g) && !self.in_doubt.contains(&g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StateError {
    #[error("key {0} is not covered by any granule")]
    UnmappedKey(Key),
}

/// The owner recorded in `partition` for the granule covering `key`. `None`
/// means the partition holds no entry for that granule.
pub fn lookup_owner(
    layout: &GranuleLayout,
    partition: &GTablePartition,
    key: Key,
) -> Result<(GranuleId, Option<NodeId>), StateError> {
    let g = layout.granule_of(key).ok_or(StateError::UnmappedKey(key))?;
    Ok((g, partition.entries.get(&g).map(|e| e.owner)))
}

/// H-LSN per log. Monotone: observations below the current value are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LsnTracker {
    tracked: BTreeMap<LogId, Lsn>,
}

impl LsnTracker {
    pub fn get(&self, log: LogId) -> Option<Lsn> {
        self.tracked.get(&log).copied()
    }

    pub fn observe(&mut self, log: LogId, lsn: Lsn) {
        let slot = self.tracked.entry(log).or_default();
        *slot = (*slot).max(lsn);
    }

    pub fn forget(&mut self, log: LogId) {
        self.tracked.remove(&log);
    }

    pub fn iter(&self) -> impl Iterator<Item = (LogId, Lsn)> + '_ {
        self.tracked.iter().map(|(l, n)| (*l, *n))
    }
}

/// Cached system-table images. An absent entry is invalid and must be
/// refetched from the page store at the tracked H-LSN.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaCache {
    pub mtable: Option<MTable>,
    pub gtable: BTreeMap<NodeId, GTablePartition>,
}

impl MetaCache {
    pub fn is_valid(&self, log: LogId) -> bool {
        match log {
            LogId::SysLog => self.mtable.is_some(),
            LogId::NodeLog(n) => self.gtable.contains_key(&n),
        }
    }

    pub fn clear(&mut self, log: LogId) {
        clear_meta_cache(self, log);
    }
}

/// Invalidates the system-table image governed by `log`. User-row caches are
/// not affected.
pub fn clear_meta_cache(cache: &mut MetaCache, log: LogId) {
    match log {
        LogId::SysLog => cache.mtable = None,
        LogId::NodeLog(n) => {
            cache.gtable.remove(&n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::KeyRange;
    use proptest::prelude::*;

    fn fig5_partition() -> (GranuleLayout, GTablePartition) {
        let layout = GranuleLayout::uniform(4, 400);
        let mut p = GTablePartition::new(NodeId(2));
        for (g, r) in layout.ranges() {
            if g.0 == 2 || g.0 == 3 {
                p.entries.insert(
                    *g,
                    GranuleEntry {
                        range: *r,
                        owner: NodeId(2),
                    },
                );
            }
        }
        (layout, p)
    }

    #[test]
    fn lookup_key_in_owned_range() {
        let (layout, p) = fig5_partition();
        assert_eq!(
            lookup_owner(&layout, &p, 150),
            Ok((GranuleId(2), Some(NodeId(2))))
        );
    }

    #[test]
    fn lookup_lower_bound_belongs_to_range() {
        let (layout, p) = fig5_partition();
        assert_eq!(lookup_owner(&layout, &p, 200).unwrap().0, GranuleId(3));
        assert_eq!(lookup_owner(&layout, &p, 199).unwrap().0, GranuleId(2));
    }

    #[test]
    fn lookup_outside_key_space_errors() {
        let (layout, p) = fig5_partition();
        assert_eq!(
            lookup_owner(&layout, &p, 400),
            Err(StateError::UnmappedKey(400))
        );
    }

    #[test]
    fn clear_syslog_invalidates_mtable_only() {
        let mut c = MetaCache {
            mtable: Some(MTable::default()),
            ..MetaCache::default()
        };
        c.gtable.insert(NodeId(2), GTablePartition::new(NodeId(2)));
        c.clear(LogId::SysLog);
        assert!(!c.is_valid(LogId::SysLog));
        assert!(c.is_valid(LogId::NodeLog(NodeId(2))));
    }

    #[test]
    fn clear_node_log_is_idempotent_and_local() {
        let mut c = MetaCache::default();
        c.gtable.insert(NodeId(2), GTablePartition::new(NodeId(2)));
        c.gtable.insert(NodeId(3), GTablePartition::new(NodeId(3)));
        c.clear(LogId::NodeLog(NodeId(3)));
        c.clear(LogId::NodeLog(NodeId(3)));
        assert!(!c.is_valid(LogId::NodeLog(NodeId(3))));
        assert!(c.is_valid(LogId::NodeLog(NodeId(2))));
    }

    #[test]
    fn ring_successors_wrap() {
        let mut m = MTable::default();
        for n in [1, 2, 3] {
            m.rows.insert(NodeId(n), String::new());
        }
        assert_eq!(m.successors(NodeId(3), 1), vec![NodeId(1)]);
        assert_eq!(m.successors(NodeId(1), 2), vec![NodeId(2), NodeId(3)]);
        assert_eq!(m.successors(NodeId(1), 5), vec![NodeId(2), NodeId(3)]);
    }

    #[test]
    fn tracker_never_decreases() {
        let mut t = LsnTracker::default();
        t.observe(LogId::SysLog, Lsn(4));
        t.observe(LogId::SysLog, Lsn(2));
        assert_eq!(t.get(LogId::SysLog), Some(Lsn(4)));
    }

    proptest! {
        #[test]
        fn lookup_matches_linear_scan(
            cuts in proptest::collection::btree_set(1u64..999, 1..12),
            keys in proptest::collection::vec(0u64..1000, 1..50),
        ) {
            let mut bounds: Vec<u64> = vec![0];
            bounds.extend(cuts);
            bounds.push(1000);
            let ranges: Vec<_> = bounds
                .windows(2)
                .enumerate()
                .map(|(i, w)| (GranuleId(i as u32 + 1), KeyRange::new(w[0], w[1])))
                .collect();
            let layout = GranuleLayout::new(ranges.clone()).unwrap();
            let mut p = GTablePartition::new(NodeId(1));
            for (g, r) in &ranges {
                p.entries.insert(*g, GranuleEntry { range: *r, owner: NodeId(g.0 % 3) });
            }
            for k in keys {
                let expected = ranges
                    .iter()
                    .find(|(_, r)| r.lo <= k && k < r.hi)
                    .map(|(g, _)| (*g, Some(NodeId(g.0 % 3))));
                prop_assert_eq!(lookup_owner(&layout, &p, k).ok(), expected);
            }
        }
    }
}
