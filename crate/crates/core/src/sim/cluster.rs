//! The set of nodes plus the shared log store, independent of any scheduler.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::log_store::{AppendMode, LogStore, StoreError};
use crate::node::{Effects, Input, Node, NodeConfig};
use crate::types::{GranuleEntry, GranuleId, GranuleLayout, Key, LogId, LogRecord, NodeId, TxnId, Value, WriteOp};

/// Initial cluster contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub nodes: Vec<NodeId>,
    pub layout: GranuleLayout,
    pub owners: BTreeMap<GranuleId, NodeId>,
    #[serde(default)]
    pub rows: Vec<(Key, Value)>,
}

impl Bootstrap {
    /// `granules` uniform granules over `key_space`, dealt round-robin.
    pub fn round_robin(nodes: &[NodeId], granules: u32, key_space: Key) -> Bootstrap {
        let layout = GranuleLayout::uniform(granules, key_space);
        let owners = layout
            .granules()
            .enumerate()
            .map(|(i, g)| (g, nodes[i % nodes.len()]))
            .collect();
        Bootstrap {
            nodes: nodes.to_vec(),
            layout,
            owners,
            rows: Vec::new(),
        }
    }

    /// Writes the initial logs: one SysLog batch per member, then per node a
    /// partition batch and, if it holds any rows, a row batch. In centralized
    /// mode the whole GTable also goes into the SysLog.
    pub fn install(&self, store: &LogStore, centralized: bool) -> Result<(), StoreError> {
        let boot = TxnId::external(0);
        store.create_log(LogId::SysLog)?;
        let mut sys = crate::types::Lsn::ZERO;
        for n in &self.nodes {
            let op = WriteOp::MTable {
                node: *n,
                address: Some(format!("node-{}", n.0)),
            };
            sys = store.append(LogId::SysLog, vec![LogRecord::updates(boot, vec![op])], sys)?.lsn;
        }
        if centralized {
            let ops = self.gtable_ops(|_| true);
            store.append(LogId::SysLog, vec![LogRecord::updates(boot, ops)], sys)?;
        }
        for n in &self.nodes {
            let log = LogId::NodeLog(*n);
            store.create_log(log)?;
            let ops = self.gtable_ops(|o| o == *n);
            let mut at = crate::types::Lsn::ZERO;
            if !ops.is_empty() {
                at = store.append(log, vec![LogRecord::updates(boot, ops)], at)?.lsn;
            }
            let rows: Vec<WriteOp> = self
                .rows
                .iter()
                .filter(|(k, _)| self.layout.granule_of(*k).and_then(|g| self.owners.get(&g)) == Some(n))
                .map(|(k, v)| WriteOp::User { key: *k, value: Some(*v) })
                .collect();
            if !rows.is_empty() {
                store.append(log, vec![LogRecord::updates(boot, rows)], at)?;
            }
        }
        Ok(())
    }

    fn gtable_ops(&self, keep: impl Fn(NodeId) -> bool) -> Vec<WriteOp> {
        self.owners
            .iter()
            .filter(|(_, o)| keep(**o))
            .filter_map(|(g, o)| {
                self.layout.range_of(*g).map(|range| WriteOp::GTable {
                    granule: *g,
                    entry: Some(GranuleEntry { range, owner: *o }),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Up,
    /// Alive but not scheduled; keeps its volatile state.
    Paused,
    Crashed,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub node: Node,
    pub status: NodeStatus,
}

/// Log creations and deletions observed since the last call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogChanges {
    pub created: Vec<LogId>,
    pub deleted: Vec<LogId>,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub store: LogStore,
    pub layout: Arc<GranuleLayout>,
    pub cfg: Arc<NodeConfig>,
    pub slots: BTreeMap<NodeId, Slot>,
    known_logs: BTreeSet<LogId>,
}

impl Cluster {
    /// Installs `boot` into a fresh store and boots every node.
    pub fn new(boot: &Bootstrap, cfg: NodeConfig, mode: AppendMode) -> (Cluster, Vec<(NodeId, Effects)>) {
        Cluster::with_store(boot, cfg, LogStore::with_mode(mode))
    }

    pub fn with_store(boot: &Bootstrap, cfg: NodeConfig, store: LogStore) -> (Cluster, Vec<(NodeId, Effects)>) {
        boot.install(&store, cfg.centralized).expect("bootstrap on an empty store");
        let mut c = Cluster {
            known_logs: BTreeSet::new(),
            store,
            layout: Arc::new(boot.layout.clone()),
            cfg: Arc::new(cfg),
            slots: BTreeMap::new(),
        };
        let mut boots = Vec::new();
        for n in &boot.nodes {
            let mut fx = Effects::default();
            let node = Node::boot(*n, 0, c.cfg.clone(), c.layout.clone(), &c.store, &mut fx);
            c.slots.insert(*n, Slot { node, status: NodeStatus::Up });
            boots.push((*n, fx));
        }
        (c, boots)
    }

    pub fn status(&self, n: NodeId) -> Option<NodeStatus> {
        self.slots.get(&n).map(|s| s.status)
    }

    pub fn node(&self, n: NodeId) -> Option<&Node> {
        self.slots.get(&n).map(|s| &s.node)
    }

    /// Runs one input on `to` if it is up.
    pub fn deliver(&mut self, now: u64, to: NodeId, input: Input) -> Option<Effects> {
        let slot = self.slots.get_mut(&to)?;
        if slot.status != NodeStatus::Up {
            return None;
        }
        let mut fx = Effects::default();
        slot.node.handle(now, input, &self.store, &mut fx);
        Some(fx)
    }

    pub fn crash(&mut self, n: NodeId) -> bool {
        match self.slots.get_mut(&n) {
            Some(s) if s.status != NodeStatus::Crashed => {
                s.status = NodeStatus::Crashed;
                true
            }
            _ => false,
        }
    }

    /// Restarts a crashed node with fresh volatile state.
    pub fn recover(&mut self, n: NodeId) -> Option<Effects> {
        let slot = self.slots.get_mut(&n)?;
        if slot.status != NodeStatus::Crashed {
            return None;
        }
        let mut fx = Effects::default();
        let inc = slot.node.incarnation + 1;
        slot.node = Node::boot(n, inc, self.cfg.clone(), self.layout.clone(), &self.store, &mut fx);
        slot.status = NodeStatus::Up;
        Some(fx)
    }

    pub fn pause(&mut self, n: NodeId) -> bool {
        self.set_status(n, NodeStatus::Up, NodeStatus::Paused)
    }

    pub fn resume(&mut self, n: NodeId) -> bool {
        self.set_status(n, NodeStatus::Paused, NodeStatus::Up)
    }

    fn set_status(&mut self, n: NodeId, from: NodeStatus, to: NodeStatus) -> bool {
        match self.slots.get_mut(&n) {
            Some(s) if s.status == from => {
                s.status = to;
                true
            }
            _ => false,
        }
    }

    /// Creates the log of a joining node and boots it. Membership itself is
    /// the job of an AddNode transaction.
    pub fn spawn(&mut self, n: NodeId) -> Result<Effects, StoreError> {
        if self.slots.contains_key(&n) {
            return Err(StoreError::DuplicateLog(LogId::NodeLog(n)));
        }
        self.store.create_log(LogId::NodeLog(n))?;
        let mut fx = Effects::default();
        let node = Node::boot(n, 0, self.cfg.clone(), self.layout.clone(), &self.store, &mut fx);
        self.slots.insert(n, Slot { node, status: NodeStatus::Up });
        Ok(fx)
    }

    pub fn log_changes(&mut self) -> LogChanges {
        let now: BTreeSet<LogId> = self.store.logs().into_iter().collect();
        let out = LogChanges {
            created: now.difference(&self.known_logs).copied().collect(),
            deleted: self.known_logs.difference(&now).copied().collect(),
        };
        self.known_logs = now;
        out
    }

    /// Nodes that are up and whose own log still exists.
    pub fn live_nodes(&self) -> Vec<NodeId> {
        self.slots
            .iter()
            .filter(|(_, s)| s.status == NodeStatus::Up && !s.node.is_retired())
            .map(|(n, _)| *n)
            .collect()
    }

    /// Hashes everything that distinguishes one cluster state from another.
    pub fn fingerprint<H: std::hash::Hasher>(&self, h: &mut H) {
        use std::hash::Hash;
        for (log, img) in self.store.images() {
            log.hash(h);
            img.applied.hash(h);
            img.tables.hash(h);
            img.pending.hash(h);
            img.decided.hash(h);
        }
        for (n, s) in &self.slots {
            n.hash(h);
            s.status.hash(h);
            if s.status != NodeStatus::Crashed {
                s.node.fingerprint(h);
            }
        }
    }
}
