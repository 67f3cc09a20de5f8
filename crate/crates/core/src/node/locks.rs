//! Two-phase locking under NO_WAIT: a conflicting request fails at once.

use std::collections::{BTreeMap, BTreeSet};

use crate::types::{GranuleId, Key, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockKey {
    Granule(GranuleId),
    Key(Key),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LockMode {
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Held {
    Shared(BTreeSet<TxnId>),
    Exclusive(TxnId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LockTable {
    held: BTreeMap<LockKey, Held>,
}

impl LockTable {
    /// Grants or upgrades the lock, or returns false without waiting.
    pub fn acquire(&mut self, key: LockKey, txn: TxnId, mode: LockMode) -> bool {
        match (self.held.get_mut(&key), mode) {
            (None, LockMode::Shared) => {
                self.held.insert(key, Held::Shared(BTreeSet::from([txn])));
                true
            }
            (None, LockMode::Exclusive) => {
                self.held.insert(key, Held::Exclusive(txn));
                true
            }
            (Some(Held::Exclusive(h)), _) => *h == txn,
            (Some(Held::Shared(s)), LockMode::Shared) => {
                s.insert(txn);
                true
            }
            (Some(Held::Shared(s)), LockMode::Exclusive) => {
                if s.len() == 1 && s.contains(&txn) {
                    self.held.insert(key, Held::Exclusive(txn));
                    true
                } else {
                    false
                }
            }
        }
    }

    /// All-or-nothing acquisition of several locks.
    pub fn acquire_all(&mut self, reqs: &[(LockKey, LockMode)], txn: TxnId) -> bool {
        let snapshot = self.clone();
        for (k, m) in reqs {
            if !self.acquire(*k, txn, *m) {
                *self = snapshot;
                return false;
            }
        }
        true
    }

    pub fn release_all(&mut self, txn: TxnId) {
        self.held.retain(|_, h| match h {
            Held::Exclusive(t) => *t != txn,
            Held::Shared(s) => {
                s.remove(&txn);
                !s.is_empty()
            }
        });
    }

    pub fn holds_any(&self, txn: TxnId) -> bool {
        self.held.values().any(|h| match h {
            Held::Exclusive(t) => *t == txn,
            Held::Shared(s) => s.contains(&txn),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: u64) -> TxnId {
        TxnId::external(n)
    }

    const G: LockKey = LockKey::Granule(GranuleId(3));

    #[test]
    fn shared_blocks_exclusive_without_waiting() {
        let mut l = LockTable::default();
        assert!(l.acquire(G, t(1), LockMode::Shared));
        assert!(l.acquire(G, t(2), LockMode::Shared));
        assert!(!l.acquire(G, t(3), LockMode::Exclusive));
        l.release_all(t(1));
        l.release_all(t(2));
        assert!(l.acquire(G, t(3), LockMode::Exclusive));
        assert!(!l.acquire(G, t(1), LockMode::Shared));
    }

    #[test]
    fn sole_shared_holder_upgrades() {
        let mut l = LockTable::default();
        assert!(l.acquire(G, t(1), LockMode::Shared));
        assert!(l.acquire(G, t(1), LockMode::Exclusive));
    }

    #[test]
    fn failed_batch_acquires_nothing() {
        let mut l = LockTable::default();
        l.acquire(LockKey::Key(5), t(9), LockMode::Exclusive);
        let reqs = [(G, LockMode::Shared), (LockKey::Key(5), LockMode::Shared)];
        assert!(!l.acquire_all(&reqs, t(1)));
        assert!(!l.holds_any(t(1)));
        l.release_all(t(9));
        assert!(l.is_empty());
    }
}
