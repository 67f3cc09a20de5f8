//! File-backed persistence: one file per log, one framed batch per line.
//!
//! Frame layout: `[u64 LE lsn][u32 LE payload length][JSON payload]['\n']`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::types::{LogId, Lsn, NodeId};

use super::page::Batch;

pub fn file_name(log: LogId) -> String {
    match log {
        LogId::SysLog => "syslog.log".to_string(),
        LogId::NodeLog(n) => format!("node-{}.log", n.0),
    }
}

pub fn parse_file_name(name: &str) -> Option<LogId> {
    if name == "syslog.log" {
        return Some(LogId::SysLog);
    }
    let id = name.strip_prefix("node-")?.strip_suffix(".log")?;
    id.parse().ok().map(|n| LogId::NodeLog(NodeId(n)))
}

pub fn encode_frame(lsn: Lsn, batch: &Batch) -> Vec<u8> {
    let payload = serde_json::to_vec(batch).expect("batches serialize");
    let mut out = Vec::with_capacity(payload.len() + 13);
    out.extend_from_slice(&lsn.0.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.push(b'\n');
    out
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("truncated frame at byte {0}")]
    Truncated(usize),
    #[error("frame at byte {at} has lsn {found}, expected {expected}")]
    Gap { at: usize, found: u64, expected: u64 },
    #[error("bad payload at byte {at}: {msg}")]
    Payload { at: usize, msg: String },
}

/// Decodes a whole file, checking that LSNs run 1, 2, 3, ... without gaps.
pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Batch>, FrameError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() - at < 12 {
            return Err(FrameError::Truncated(at));
        }
        let lsn = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[at + 8..at + 12].try_into().unwrap()) as usize;
        let end = at + 12 + len;
        if end + 1 > bytes.len() || bytes[end] != b'\n' {
            return Err(FrameError::Truncated(at));
        }
        let expected = out.len() as u64 + 1;
        if lsn != expected {
            return Err(FrameError::Gap {
                at,
                found: lsn,
                expected,
            });
        }
        let batch: Batch =
            serde_json::from_slice(&bytes[at + 12..end]).map_err(|e| FrameError::Payload {
                at,
                msg: e.to_string(),
            })?;
        out.push(batch);
        at = end + 1;
    }
    Ok(out)
}

/// Appends frames to per-log files under a directory.
#[derive(Debug, Clone)]
pub struct FileBacking {
    dir: PathBuf,
}

impl FileBacking {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<FileBacking> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileBacking { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, log: LogId) -> PathBuf {
        self.dir.join(file_name(log))
    }

    pub fn create(&self, log: LogId) -> io::Result<()> {
        File::create(self.path(log)).map(|_| ())
    }

    pub fn append(&self, log: LogId, lsn: Lsn, batch: &Batch) -> io::Result<()> {
        let f = OpenOptions::new().append(true).open(self.path(log))?;
        let mut w = BufWriter::new(f);
        w.write_all(&encode_frame(lsn, batch))?;
        w.flush()
    }

    /// Moves a deleted log's file aside so a later create starts fresh.
    pub fn retire(&self, log: LogId, generation: usize) -> io::Result<()> {
        let from = self.path(log);
        let to = self
            .dir
            .join(format!("{}.deleted-{generation}", file_name(log)));
        fs::rename(from, to)
    }

    /// Every live log file in the directory, decoded.
    pub fn load(&self) -> Result<Vec<(LogId, Vec<Batch>)>, FrameError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(log) = name.to_str().and_then(parse_file_name) else {
                continue;
            };
            let mut bytes = Vec::new();
            File::open(entry.path())?.read_to_end(&mut bytes)?;
            out.push((log, decode_frames(&bytes)?));
        }
        out.sort_by_key(|(l, _)| *l);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LogRecord, TxnId, WriteOp};

    fn batch(v: i64) -> Batch {
        vec![LogRecord::updates(
            TxnId::external(v as u64),
            vec![WriteOp::User {
                key: 1,
                value: Some(v),
            }],
        )]
    }

    #[test]
    fn frames_round_trip() {
        let mut bytes = encode_frame(Lsn(1), &batch(10));
        bytes.extend(encode_frame(Lsn(2), &batch(20)));
        assert_eq!(decode_frames(&bytes).unwrap(), vec![batch(10), batch(20)]);
    }

    #[test]
    fn gap_detected() {
        let mut bytes = encode_frame(Lsn(1), &batch(10));
        bytes.extend(encode_frame(Lsn(3), &batch(20)));
        assert!(matches!(
            decode_frames(&bytes),
            Err(FrameError::Gap { found: 3, .. })
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_frame(Lsn(1), &batch(10));
        assert!(matches!(
            decode_frames(&bytes[..bytes.len() - 3]),
            Err(FrameError::Truncated(0))
        ));
    }

    #[test]
    fn names_round_trip() {
        for log in [LogId::SysLog, LogId::NodeLog(NodeId(7))] {
            assert_eq!(parse_file_name(&file_name(log)), Some(log));
        }
        assert_eq!(parse_file_name("node-3.log.deleted-0"), None);
    }
}
