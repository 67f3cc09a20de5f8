//! The storage layer: named append-only logs with an atomic conditional
//! append, and a page store materialized by replaying those logs.

pub mod file;
pub mod page;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::types::{LogId, LogRecord, Lsn, NodeId, RowKey, RowValue, TableRef};

pub use file::{FileBacking, FrameError};
pub use page::{fold_decision, Batch, LogImage, PendingVote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppendStatus {
    Success,
    Failure,
}

/// Outcome of a conditional append. `lsn` is the new tail on success and the
/// current tail on failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendResult {
    pub status: AppendStatus,
    pub lsn: Lsn,
}

impl AppendResult {
    pub fn is_success(&self) -> bool {
        self.status == AppendStatus::Success
    }
}

/// How the append gate compares the target against the tail. `Unconditional`
/// exists only to seed a fencing bug for verifier self-tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppendMode {
    #[default]
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("log {0} does not exist")]
    UnknownLog(LogId),
    #[error("log {0} already exists")]
    DuplicateLog(LogId),
    #[error("requested lsn {requested} of {log} beyond tail {tail}")]
    FutureLsn { log: LogId, requested: Lsn, tail: Lsn },
    #[error("log {0} is at its append rate limit for this tick")]
    Throttled(LogId),
    #[error("storage io: {0}")]
    Io(String),
}

/// One append attempt, as recorded by the optional journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendEvent {
    pub by: Option<NodeId>,
    pub log: LogId,
    pub target: Lsn,
    pub ok: bool,
    /// New tail on success, observed tail on failure.
    pub lsn: Lsn,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivedLog {
    pub log: LogId,
    pub batches: Vec<Batch>,
}

#[derive(Debug, Clone, Default)]
struct LogState {
    batches: Vec<Batch>,
    image: LogImage,
}

impl LogState {
    fn tail(&self) -> Lsn {
        Lsn(self.batches.len() as u64)
    }

    fn replay(&mut self) -> &LogImage {
        self.image.advance(&self.batches);
        &self.image
    }
}

/// Contents of every log, live and deleted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub live: BTreeMap<LogId, Vec<Batch>>,
    pub archived: Vec<ArchivedLog>,
}

/// Optional per-log append budget: at most `per_tick` successful commit-path
/// appends per log per simulated tick. Decision records are exempt.
#[derive(Debug, Clone, Default)]
struct Throttle {
    per_tick: u32,
    now: u64,
    used: BTreeMap<LogId, u32>,
}

#[derive(Debug, Default)]
pub struct LogStore {
    logs: RwLock<BTreeMap<LogId, Arc<Mutex<LogState>>>>,
    archive: Mutex<Vec<ArchivedLog>>,
    journal: Mutex<Option<Vec<AppendEvent>>>,
    throttle: Mutex<Option<Throttle>>,
    mode: AppendMode,
    files: Option<FileBacking>,
}

impl Clone for LogStore {
    /// Deep copy: the clone shares no log state with the original.
    fn clone(&self) -> LogStore {
        let logs = self
            .logs
            .read()
            .iter()
            .map(|(id, st)| (*id, Arc::new(Mutex::new(st.lock().clone()))))
            .collect();
        LogStore {
            logs: RwLock::new(logs),
            archive: Mutex::new(self.archive.lock().clone()),
            journal: Mutex::new(self.journal.lock().clone()),
            throttle: Mutex::new(self.throttle.lock().clone()),
            mode: self.mode,
            files: self.files.clone(),
        }
    }
}

impl LogStore {
    pub fn new() -> LogStore {
        LogStore::default()
    }

    pub fn with_mode(mode: AppendMode) -> LogStore {
        LogStore {
            mode,
            ..LogStore::default()
        }
    }

    /// A store that mirrors every log to files under `dir`, starting from
    /// whatever logs the directory already holds.
    pub fn open_dir(dir: &Path) -> Result<LogStore, StoreError> {
        let backing = FileBacking::new(dir).map_err(|e| StoreError::Io(e.to_string()))?;
        let loaded = backing.load().map_err(|e| StoreError::Io(e.to_string()))?;
        let logs = loaded
            .into_iter()
            .map(|(id, batches)| {
                let st = LogState {
                    batches,
                    image: LogImage::default(),
                };
                (id, Arc::new(Mutex::new(st)))
            })
            .collect();
        Ok(LogStore {
            logs: RwLock::new(logs),
            files: Some(backing),
            ..LogStore::default()
        })
    }

    /// File-backed when `MARLIN_LOG_DIR` is set, in-memory otherwise.
    pub fn from_env() -> Result<LogStore, StoreError> {
        match std::env::var_os("MARLIN_LOG_DIR") {
            Some(dir) => LogStore::open_dir(Path::new(&dir)),
            None => Ok(LogStore::new()),
        }
    }

    pub fn mode(&self) -> AppendMode {
        self.mode
    }

    pub fn set_throttle(&self, per_tick: Option<u32>) {
        *self.throttle.lock() = per_tick.map(|per_tick| Throttle {
            per_tick,
            ..Throttle::default()
        });
    }

    pub fn set_now(&self, tick: u64) {
        if let Some(t) = self.throttle.lock().as_mut() {
            if t.now != tick {
                t.now = tick;
                t.used.clear();
            }
        }
    }

    pub fn set_journal(&self, on: bool) {
        let mut j = self.journal.lock();
        match (on, j.is_some()) {
            (true, false) => *j = Some(Vec::new()),
            (false, true) => *j = None,
            _ => {}
        }
    }

    pub fn drain_journal(&self) -> Vec<AppendEvent> {
        self.journal.lock().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn state(&self, log: LogId) -> Result<Arc<Mutex<LogState>>, StoreError> {
        self.logs
            .read()
            .get(&log)
            .cloned()
            .ok_or(StoreError::UnknownLog(log))
    }

    pub fn create_log(&self, log: LogId) -> Result<(), StoreError> {
        let mut logs = self.logs.write();
        if logs.contains_key(&log) {
            return Err(StoreError::DuplicateLog(log));
        }
        if let Some(f) = &self.files {
            f.create(log).map_err(|e| StoreError::Io(e.to_string()))?;
        }
        logs.insert(log, Arc::default());
        Ok(())
    }

    /// Removes `log`; its contents move to the read-only tombstone archive.
    pub fn delete_log(&self, log: LogId) -> Result<(), StoreError> {
        let st = self
            .logs
            .write()
            .remove(&log)
            .ok_or(StoreError::UnknownLog(log))?;
        let batches = std::mem::take(&mut st.lock().batches);
        let mut archive = self.archive.lock();
        if let Some(f) = &self.files {
            f.retire(log, archive.len())
                .map_err(|e| StoreError::Io(e.to_string()))?;
        }
        archive.push(ArchivedLog { log, batches });
        Ok(())
    }

    pub fn exists(&self, log: LogId) -> bool {
        self.logs.read().contains_key(&log)
    }

    pub fn logs(&self) -> Vec<LogId> {
        self.logs.read().keys().copied().collect()
    }

    pub fn archived(&self) -> Vec<ArchivedLog> {
        self.archive.lock().clone()
    }

    pub fn append(
        &self,
        log: LogId,
        records: Batch,
        target: Lsn,
    ) -> Result<AppendResult, StoreError> {
        self.append_as(None, log, records, target)
    }

    /// Atomic check-and-append of one batch. The per-log mutex makes the tail
    /// comparison and the push a single step for all concurrent callers.
    pub fn append_as(
        &self,
        by: Option<NodeId>,
        log: LogId,
        records: Batch,
        target: Lsn,
    ) -> Result<AppendResult, StoreError> {
        let st = self.state(log)?;
        let mut st = st.lock();
        let tail = st.tail();
        let accept = match self.mode {
            AppendMode::Conditional => tail == target,
            AppendMode::Unconditional => true,
        };
        let metered = records
            .iter()
            .any(|r| !matches!(r.kind, crate::types::RecordKind::Decision(_)));
        if accept && metered {
            if let Some(t) = self.throttle.lock().as_mut() {
                let used = t.used.entry(log).or_default();
                if *used >= t.per_tick {
                    return Err(StoreError::Throttled(log));
                }
                *used += 1;
            }
        }
        let result = if accept {
            let lsn = tail.next();
            if let Some(f) = &self.files {
                f.append(log, lsn, &records)
                    .map_err(|e| StoreError::Io(e.to_string()))?;
            }
            st.batches.push(records.clone());
            AppendResult {
                status: AppendStatus::Success,
                lsn,
            }
        } else {
            AppendResult {
                status: AppendStatus::Failure,
                lsn: tail,
            }
        };
        if let Some(j) = self.journal.lock().as_mut() {
            j.push(AppendEvent {
                by,
                log,
                target,
                ok: result.is_success(),
                lsn: result.lsn,
                records: if result.is_success() {
                    records
                } else {
                    Vec::new()
                },
            });
        }
        Ok(result)
    }

    pub fn tail(&self, log: LogId) -> Result<Lsn, StoreError> {
        Ok(self.state(log)?.lock().tail())
    }

    /// Records in `(from, tail]`, one batch per LSN.
    pub fn read(&self, log: LogId, from: Lsn) -> Result<Vec<(Lsn, Batch)>, StoreError> {
        let st = self.state(log)?;
        let st = st.lock();
        if from > st.tail() {
            return Err(StoreError::FutureLsn {
                log,
                requested: from,
                tail: st.tail(),
            });
        }
        Ok(st.batches[from.0 as usize..]
            .iter()
            .enumerate()
            .map(|(i, b)| (Lsn(from.0 + i as u64 + 1), b.clone()))
            .collect())
    }

    /// Flattened records in `(from, tail]`.
    pub fn read_records(&self, log: LogId, from: Lsn) -> Result<Vec<LogRecord>, StoreError> {
        Ok(self
            .read(log, from)?
            .into_iter()
            .flat_map(|(_, b)| b)
            .collect())
    }

    /// Every batch of a live log, or of the most recent archived incarnation.
    pub fn batches_any(&self, log: LogId) -> Option<Vec<Batch>> {
        if let Ok(st) = self.state(log) {
            return Some(st.lock().batches.clone());
        }
        self.archive
            .lock()
            .iter()
            .rev()
            .find(|a| a.log == log)
            .map(|a| a.batches.clone())
    }

    /// Replays `log` to at least `min_lsn` and hands the image to `f`.
    pub fn with_image<R>(
        &self,
        log: LogId,
        min_lsn: Lsn,
        f: impl FnOnce(&LogImage) -> R,
    ) -> Result<R, StoreError> {
        let st = self.state(log)?;
        let mut st = st.lock();
        let tail = st.tail();
        if min_lsn > tail {
            return Err(StoreError::FutureLsn {
                log,
                requested: min_lsn,
                tail,
            });
        }
        Ok(f(st.replay()))
    }

    pub fn image(&self, log: LogId, min_lsn: Lsn) -> Result<LogImage, StoreError> {
        self.with_image(log, min_lsn, LogImage::clone)
    }

    pub fn get_page(
        &self,
        table: TableRef,
        key: RowKey,
        min_lsn: Lsn,
    ) -> Result<Option<RowValue>, StoreError> {
        self.with_image(table.log(), min_lsn, |img| img.tables.row(key))
    }

    /// Brings every live image up to its tail. Used by background replay.
    pub fn replay_all(&self) {
        let states: Vec<_> = self.logs.read().values().cloned().collect();
        for st in states {
            st.lock().replay();
        }
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let live = self
            .logs
            .read()
            .iter()
            .map(|(id, st)| (*id, st.lock().batches.clone()))
            .collect();
        StoreSnapshot {
            live,
            archived: self.archived(),
        }
    }

    /// Replayed images of every live log, for state fingerprinting.
    pub fn images(&self) -> Vec<(LogId, LogImage)> {
        self.logs
            .read()
            .iter()
            .map(|(id, st)| (*id, st.lock().replay().clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GranuleEntry, GranuleId, KeyRange, TxnId, Verdict, WriteOp};
    use proptest::prelude::*;

    fn rec(v: i64) -> Batch {
        vec![LogRecord::updates(
            TxnId::external(v as u64),
            vec![WriteOp::User {
                key: 9,
                value: Some(v),
            }],
        )]
    }

    fn store_with(log: LogId) -> LogStore {
        let s = LogStore::new();
        s.create_log(log).unwrap();
        s
    }

    #[test]
    fn append_to_empty_log_lands_at_one() {
        let s = store_with(LogId::SysLog);
        let r = s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap();
        assert_eq!(r.status, AppendStatus::Success);
        assert_eq!(r.lsn, Lsn(1));
    }

    #[test]
    fn stale_target_fails_with_current_tail() {
        let s = store_with(LogId::SysLog);
        s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap();
        let r = s.append(LogId::SysLog, rec(2), Lsn(0)).unwrap();
        assert_eq!(r.status, AppendStatus::Failure);
        assert_eq!(r.lsn, Lsn(1));
    }

    #[test]
    fn read_bounds() {
        let s = store_with(LogId::SysLog);
        assert!(s.read(LogId::SysLog, Lsn(0)).unwrap().is_empty());
        for i in 0..3 {
            s.append(LogId::SysLog, rec(i as i64 + 1), Lsn(i)).unwrap();
        }
        let tail = s.tail(LogId::SysLog).unwrap();
        assert!(s.read(LogId::SysLog, tail).unwrap().is_empty());
        let got = s.read(LogId::SysLog, Lsn(1)).unwrap();
        assert_eq!(got, vec![(Lsn(2), rec(2)), (Lsn(3), rec(3))]);
    }

    #[test]
    fn deleted_log_rejects_appends_and_is_archived() {
        let n3 = LogId::NodeLog(NodeId(3));
        let s = store_with(n3);
        assert_eq!(s.tail(n3).unwrap(), Lsn(0));
        s.append(n3, rec(1), Lsn(0)).unwrap();
        s.delete_log(n3).unwrap();
        assert_eq!(
            s.append(n3, rec(2), Lsn(1)),
            Err(StoreError::UnknownLog(n3))
        );
        assert_eq!(s.archived()[0].batches, vec![rec(1)]);
        assert_eq!(s.delete_log(n3), Err(StoreError::UnknownLog(n3)));
    }

    #[test]
    fn duplicate_create_rejected() {
        let s = store_with(LogId::SysLog);
        assert_eq!(
            s.create_log(LogId::SysLog),
            Err(StoreError::DuplicateLog(LogId::SysLog))
        );
    }

    #[test]
    fn get_page_shows_migrated_owner() {
        let n2 = NodeId(2);
        let s = store_with(LogId::NodeLog(n2));
        let entry = |o| GranuleEntry {
            range: KeyRange::new(200, 300),
            owner: NodeId(o),
        };
        let t = TxnId::external(1);
        let op = |o| WriteOp::GTable {
            granule: GranuleId(3),
            entry: Some(entry(o)),
        };
        let log = LogId::NodeLog(n2);
        s.append(log, vec![LogRecord::updates(TxnId::external(0), vec![op(2)])], Lsn(0))
            .unwrap();
        s.append(log, vec![LogRecord::vote_yes(t, vec![log], vec![op(3)])], Lsn(1))
            .unwrap();
        let key = RowKey::Granule(GranuleId(3));
        let table = TableRef::GTable(n2);
        assert_eq!(
            s.get_page(table, key, Lsn(2)).unwrap(),
            Some(RowValue::Granule(entry(2)))
        );
        s.append(log, vec![LogRecord::decision(t, Verdict::Commit)], Lsn(2))
            .unwrap();
        assert_eq!(
            s.get_page(table, key, Lsn(3)).unwrap(),
            Some(RowValue::Granule(entry(3)))
        );
    }

    #[test]
    fn get_page_absent_and_future() {
        let s = store_with(LogId::SysLog);
        let key = RowKey::Member(NodeId(1));
        assert_eq!(s.get_page(TableRef::MTable, key, Lsn(0)).unwrap(), None);
        assert!(matches!(
            s.get_page(TableRef::MTable, key, Lsn(1)),
            Err(StoreError::FutureLsn { .. })
        ));
    }

    #[test]
    fn unconditional_mode_ignores_target() {
        let s = LogStore::with_mode(AppendMode::Unconditional);
        s.create_log(LogId::SysLog).unwrap();
        s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap();
        assert!(s.append(LogId::SysLog, rec(2), Lsn(0)).unwrap().is_success());
        assert_eq!(s.tail(LogId::SysLog).unwrap(), Lsn(2));
    }

    #[test]
    fn throttle_caps_successes_per_tick() {
        let s = store_with(LogId::SysLog);
        s.set_throttle(Some(1));
        s.set_now(1);
        assert!(s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap().is_success());
        assert_eq!(
            s.append(LogId::SysLog, rec(2), Lsn(1)),
            Err(StoreError::Throttled(LogId::SysLog))
        );
        let d = vec![LogRecord::decision(TxnId::external(1), Verdict::Commit)];
        assert!(s.append(LogId::SysLog, d, Lsn(1)).unwrap().is_success());
        s.set_now(2);
        assert!(s.append(LogId::SysLog, rec(2), Lsn(2)).unwrap().is_success());
    }

    #[test]
    fn journal_records_attempts() {
        let s = store_with(LogId::SysLog);
        s.set_journal(true);
        s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap();
        s.append(LogId::SysLog, rec(2), Lsn(0)).unwrap();
        let j = s.drain_journal();
        assert_eq!(j.len(), 2);
        assert!(j[0].ok && !j[1].ok);
        assert!(j[1].records.is_empty());
    }

    #[test]
    fn file_backing_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = LogStore::open_dir(dir.path()).unwrap();
            s.create_log(LogId::SysLog).unwrap();
            s.append(LogId::SysLog, rec(1), Lsn(0)).unwrap();
            s.append(LogId::SysLog, rec(2), Lsn(1)).unwrap();
        }
        let s = LogStore::open_dir(dir.path()).unwrap();
        assert_eq!(s.tail(LogId::SysLog).unwrap(), Lsn(2));
        assert_eq!(
            s.get_page(TableRef::User(NodeId(0)), RowKey::User(9), Lsn(0)),
            Err(StoreError::UnknownLog(LogId::NodeLog(NodeId(0))))
        );
        let img = s.image(LogId::SysLog, Lsn(2)).unwrap();
        assert_eq!(img.tables.users[&9], 2);
    }

    fn arb_op() -> impl Strategy<Value = WriteOp> {
        (0u64..4, proptest::option::of(0i64..5)).prop_map(|(key, value)| WriteOp::User { key, value })
    }

    /// Random logs mixing 1PC updates, votes and decisions.
    fn arb_batches() -> impl Strategy<Value = Vec<Batch>> {
        let rec = (0u8..3, 0u64..4, proptest::collection::vec(arb_op(), 0..3), any::<bool>())
            .prop_map(|(kind, t, ops, commit)| {
                let txn = TxnId::external(t);
                match kind {
                    0 => LogRecord::updates(txn, ops),
                    1 => LogRecord::vote_yes(txn, vec![], ops),
                    _ => LogRecord::decision(
                        txn,
                        if commit { Verdict::Commit } else { Verdict::Abort },
                    ),
                }
            });
        proptest::collection::vec(proptest::collection::vec(rec, 1..3), 0..12)
    }

    proptest! {
        #[test]
        fn failed_append_leaves_log_identical(batches in arb_batches(), extra in arb_batches()) {
            let s = store_with(LogId::SysLog);
            for (i, b) in batches.iter().enumerate() {
                s.append(LogId::SysLog, b.clone(), Lsn(i as u64)).unwrap();
            }
            let before = serde_json::to_vec(&s.read(LogId::SysLog, Lsn(0)).unwrap()).unwrap();
            let tail = s.tail(LogId::SysLog).unwrap();
            for b in extra {
                let r = s.append(LogId::SysLog, b, Lsn(tail.0 + 1)).unwrap();
                prop_assert_eq!(r.status, AppendStatus::Failure);
                prop_assert_eq!(r.lsn, tail);
            }
            let after = serde_json::to_vec(&s.read(LogId::SysLog, Lsn(0)).unwrap()).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn replay_schedule_does_not_matter(batches in arb_batches(), cuts in proptest::collection::vec(0usize..13, 0..6)) {
            let mut inc = LogImage::default();
            let mut cuts = cuts;
            cuts.sort();
            for c in cuts {
                inc.advance(&batches[..c.min(batches.len())]);
            }
            inc.advance(&batches);
            prop_assert_eq!(inc, LogImage::fold(&batches));
        }
    }
}
