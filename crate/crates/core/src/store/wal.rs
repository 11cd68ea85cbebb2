//! Write-ahead log: one JSON line per committed transaction.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::records::{Entity, Kind};
use crate::clock::Millis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub at: Millis,
    pub kind: Kind,
    pub id: String,
    /// `None` on insert.
    pub from: Option<String>,
    pub to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum Op {
    Put {
        entity: Entity,
    },
    Lease {
        kind: Kind,
        id: String,
        worker: String,
        expires_at: Millis,
    },
    Unlease {
        kind: Kind,
        id: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct WalRecord {
    pub seq: u64,
    pub at: Millis,
    pub ops: Vec<Op>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditEvent>,
}

/// Append-only byte sink holding the log.
pub trait LogSink: Send {
    /// Appends `bytes` durably; returns only once they survive a crash.
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    /// Drops everything past the first `len` bytes.
    fn truncate(&mut self, len: u64) -> io::Result<()>;
}

/// In-memory log. Clones share the buffer, so a "crashed" store can be
/// reopened from the bytes it left behind.
#[derive(Debug, Clone, Default)]
pub struct MemoryLog(Arc<Mutex<Vec<u8>>>);

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends raw bytes, bypassing any store. Used to fake torn writes.
    pub fn append_raw(&self, bytes: &[u8]) {
        self.0.lock().extend_from_slice(bytes);
    }
}

impl LogSink for MemoryLog {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.lock().extend_from_slice(bytes);
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.bytes())
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.0.lock().truncate(len as usize);
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileLog {
    path: PathBuf,
    file: File,
    fsync: bool,
}

impl FileLog {
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        Ok(Self { path, file, fsync })
    }
}

impl LogSink for FileLog {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        File::open(&self.path)?.read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

pub(crate) fn encode(rec: &WalRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(rec).expect("log record serializes");
    line.push(b'\n');
    line
}

/// Decodes a log image. A final line that is unterminated or unparsable is
/// a torn write and is dropped; damage anywhere else is corruption.
/// Also returns the length of the intact prefix.
pub(crate) fn decode(bytes: &[u8]) -> Result<(Vec<WalRecord>, usize), (usize, String)> {
    let mut out = Vec::new();
    let mut valid = 0;
    let lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    // split yields a trailing empty slice when the image ends in '\n'.
    let complete = lines.len() - 1;
    for (i, line) in lines.iter().enumerate().take(complete) {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_slice::<WalRecord>(line) {
            Ok(r) => {
                out.push(r);
                valid = line.as_ptr() as usize - bytes.as_ptr() as usize + line.len() + 1;
            }
            Err(_) if i + 1 == complete && lines[complete].is_empty() => break,
            Err(e) => return Err((i + 1, e.to_string())),
        }
    }
    Ok((out, valid))
}
