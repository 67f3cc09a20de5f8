//! Row images and the write-op fold shared by page replay and cache refresh.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{GranuleEntry, GranuleId, Key, NodeId, RowKey, RowValue, Value, WriteOp};

/// Materialized rows of every table a single log can govern. The SysLog only
/// ever populates `mtable`; node logs populate `gtable` and `users`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableImage {
    pub mtable: BTreeMap<NodeId, String>,
    pub gtable: BTreeMap<GranuleId, GranuleEntry>,
    pub users: BTreeMap<Key, Value>,
}

impl TableImage {
    /// Left fold of `ops`; tombstones remove, last writer wins per key.
    pub fn apply_write_ops<'a>(&mut self, ops: impl IntoIterator<Item = &'a WriteOp>) {
        for op in ops {
            match op {
                WriteOp::MTable { node, address } => match address {
                    Some(a) => {
                        self.mtable.insert(*node, a.clone());
                    }
                    None => {
                        self.mtable.remove(node);
                    }
                },
                WriteOp::GTable { granule, entry } => match entry {
                    Some(e) => {
                        self.gtable.insert(*granule, *e);
                    }
                    None => {
                        self.gtable.remove(granule);
                    }
                },
                WriteOp::User { key, value } => match value {
                    Some(v) => {
                        self.users.insert(*key, *v);
                    }
                    None => {
                        self.users.remove(key);
                    }
                },
            }
        }
    }

    pub fn row(&self, key: RowKey) -> Option<RowValue> {
        match key {
            RowKey::Member(n) => self
                .mtable
                .get(&n)
                .map(|a| RowValue::Member { address: a.clone() }),
            RowKey::Granule(g) => self.gtable.get(&g).map(|e| RowValue::Granule(*e)),
            RowKey::User(k) => self.users.get(&k).map(|v| RowValue::User(*v)),
        }
    }
}

/// Functional form of [`TableImage::apply_write_ops`].
pub fn apply_write_ops(mut image: TableImage, ops: &[WriteOp]) -> TableImage {
    image.apply_write_ops(ops);
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::KeyRange;

    fn add(n: u32) -> WriteOp {
        WriteOp::MTable {
            node: NodeId(n),
            address: Some(format!("n{n}")),
        }
    }

    #[test]
    fn empty_ops_leave_image_unchanged() {
        let mut img = TableImage::default();
        img.apply_write_ops(&[add(1)]);
        let before = img.clone();
        assert_eq!(apply_write_ops(img, &[]), before);
    }

    #[test]
    fn add_then_delete_removes_member() {
        let img = apply_write_ops(
            TableImage::default(),
            &[
                add(3),
                WriteOp::MTable {
                    node: NodeId(3),
                    address: None,
                },
            ],
        );
        assert!(!img.mtable.contains_key(&NodeId(3)));
    }

    #[test]
    fn last_writer_wins_within_list() {
        let entry = |o| GranuleEntry {
            range: KeyRange::new(0, 10),
            owner: NodeId(o),
        };
        let img = apply_write_ops(
            TableImage::default(),
            &[
                WriteOp::GTable {
                    granule: GranuleId(1),
                    entry: Some(entry(1)),
                },
                WriteOp::GTable {
                    granule: GranuleId(1),
                    entry: Some(entry(2)),
                },
            ],
        );
        assert_eq!(img.gtable[&GranuleId(1)].owner, NodeId(2));
    }
}
