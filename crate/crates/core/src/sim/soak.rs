//! Multi-threaded append contention against a shared store.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::log_store::{LogStore, StoreError};
use crate::types::{LogId, LogRecord, Lsn, NodeId, TxnId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoakConfig {
    pub threads: u32,
    /// Successful appends each thread makes to each log.
    pub appends: u64,
    pub logs: Vec<LogId>,
}

impl Default for SoakConfig {
    fn default() -> SoakConfig {
        SoakConfig {
            threads: 8,
            appends: 10_000,
            logs: vec![LogId::SysLog, LogId::NodeLog(NodeId(1)), LogId::NodeLog(NodeId(2))],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoakLogReport {
    pub log: LogId,
    pub tail: u64,
    pub successes: u64,
    pub failures: u64,
    /// LSNs in `1..=tail` with no batch, or with a batch no thread claimed.
    pub gaps: u64,
    /// LSNs claimed by more than one successful append.
    pub double_claims: u64,
    /// Batches whose content differs from what the claiming thread wrote.
    pub mismatches: u64,
    /// Threads whose own appends landed out of issue order.
    pub reordered: u64,
}

impl SoakLogReport {
    pub fn clean(&self) -> bool {
        self.gaps == 0 && self.double_claims == 0 && self.mismatches == 0 && self.reordered == 0 && self.successes == self.tail
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoakReport {
    pub threads: u32,
    pub appends: u64,
    pub logs: Vec<SoakLogReport>,
}

impl SoakReport {
    pub fn pass(&self) -> bool {
        let want = self.threads as u64 * self.appends;
        self.logs.iter().all(|l| l.clean() && l.tail == want)
    }
}

/// Every thread appends `appends` batches to every log, each time targeting
/// the tail it last saw and retrying from the returned tail on a lost race.
pub fn run_soak(store: Arc<LogStore>, cfg: &SoakConfig) -> Result<SoakReport, StoreError> {
    for log in &cfg.logs {
        if !store.exists(*log) {
            store.create_log(*log)?;
        }
    }
    let handles: Vec<_> = (0..cfg.threads)
        .map(|t| {
            let store = Arc::clone(&store);
            let logs = cfg.logs.clone();
            let n = cfg.appends;
            thread::spawn(move || -> Result<Vec<(Vec<Lsn>, u64)>, StoreError> {
                let mut out = vec![(Vec::with_capacity(n as usize), 0u64); logs.len()];
                let mut seen: Vec<Lsn> = logs.iter().map(|l| store.tail(*l)).collect::<Result<_, _>>()?;
                for seq in 0..n {
                    for (i, log) in logs.iter().enumerate() {
                        let rec = LogRecord::updates(TxnId { origin: t + 1, seq }, Vec::new());
                        loop {
                            let r = store.append(*log, vec![rec.clone()], seen[i])?;
                            seen[i] = r.lsn;
                            if r.is_success() {
                                out[i].0.push(r.lsn);
                                break;
                            }
                            out[i].1 += 1;
                        }
                    }
                }
                Ok(out)
            })
        })
        .collect();

    let mut per_thread = Vec::new();
    for h in handles {
        per_thread.push(h.join().expect("soak thread panicked")?);
    }

    let mut logs = Vec::new();
    for (i, log) in cfg.logs.iter().enumerate() {
        let batches = store.read(*log, Lsn::ZERO)?;
        let mut claims: BTreeMap<u64, Vec<(u32, u64)>> = BTreeMap::new();
        let mut rep = SoakLogReport {
            log: *log,
            tail: store.tail(*log)?.0,
            successes: 0,
            failures: 0,
            gaps: 0,
            double_claims: 0,
            mismatches: 0,
            reordered: 0,
        };
        for (t, results) in per_thread.iter().enumerate() {
            let (lsns, fails) = &results[i];
            rep.failures += fails;
            rep.successes += lsns.len() as u64;
            if lsns.windows(2).any(|w| w[0] >= w[1]) {
                rep.reordered += 1;
            }
            for (seq, l) in lsns.iter().enumerate() {
                claims.entry(l.0).or_default().push((t as u32 + 1, seq as u64));
            }
        }
        for (lsn, batch) in &batches {
            match claims.get(&lsn.0).map(Vec::as_slice) {
                None | Some([]) => rep.gaps += 1,
                Some([(t, s)]) => {
                    let ok = batch.len() == 1 && batch[0].txn == TxnId { origin: *t, seq: *s };
                    if !ok {
                        rep.mismatches += 1;
                    }
                }
                Some(_) => rep.double_claims += 1,
            }
        }
        rep.gaps += batches
            .iter()
            .enumerate()
            .filter(|(k, (l, _))| l.0 != *k as u64 + 1)
            .count() as u64;
        rep.gaps += rep.tail.saturating_sub(batches.len() as u64);
        logs.push(rep);
    }
    Ok(SoakReport {
        threads: cfg.threads,
        appends: cfg.appends,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_soak_is_gap_free() {
        let cfg = SoakConfig {
            threads: 4,
            appends: 200,
            logs: vec![LogId::SysLog],
        };
        let rep = run_soak(Arc::new(LogStore::new()), &cfg).unwrap();
        assert!(rep.pass(), "{rep:?}");
        assert_eq!(rep.logs[0].tail, 800);
    }
}
