//! Append-only transaction log of JSON lines, each carrying a CRC32 of its
//! payload text, and the content-addressed blob store beside it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use sloop_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Upsert,
    Transition,
    ScoreWrite,
    TaskWrite,
    Merge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransactionLogEntry {
    pub seq: u64,
    pub operation: Operation,
    pub payload: Box<RawValue>,
    pub checksum: u32,
}

impl TransactionLogEntry {
    pub fn new<T: Serialize>(seq: u64, operation: Operation, payload: &T) -> Result<Self> {
        let payload = serde_json::value::to_raw_value(payload)?;
        let checksum = crc32fast::hash(payload.get().as_bytes());
        Ok(Self {
            seq,
            operation,
            payload,
            checksum,
        })
    }

    pub fn verify(&self) -> bool {
        crc32fast::hash(self.payload.get().as_bytes()) == self.checksum
    }
}

/// Entries of the longest valid prefix and its length in bytes. Scanning
/// stops at a torn line, a parse failure, a bad checksum or a seq that does
/// not increase.
pub fn valid_prefix(bytes: &[u8]) -> (Vec<TransactionLogEntry>, usize) {
    let mut out: Vec<TransactionLogEntry> = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else { break };
        let Ok(e) = serde_json::from_slice::<TransactionLogEntry>(&bytes[pos..pos + nl]) else { break };
        if !e.verify() || out.last().is_some_and(|p| p.seq >= e.seq) {
            break;
        }
        out.push(e);
        pos += nl + 1;
    }
    (out, pos)
}

pub struct TxLog {
    file: Option<File>,
    fsync: bool,
    last_seq: u64,
}

impl TxLog {
    pub fn memory() -> Self {
        Self {
            file: None,
            fsync: false,
            last_seq: 0,
        }
    }

    /// Opens `path`, returning the log positioned after its valid prefix
    /// together with that prefix. Anything after it is cut off.
    pub fn open(path: &Path, fsync: bool) -> Result<(Self, Vec<TransactionLogEntry>)> {
        let bytes = if path.exists() { fs::read(path)? } else { Vec::new() };
        let (entries, len) = valid_prefix(&bytes);
        if len < bytes.len() {
            log::warn!("transaction log {}: discarding {} bytes after seq {}", path.display(), bytes.len() - len, entries.last().map_or(0, |e| e.seq));
        }
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        file.set_len(len as u64)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        let last_seq = entries.last().map_or(0, |e| e.seq);
        Ok((
            Self {
                file: Some(file),
                fsync,
                last_seq,
            },
            entries,
        ))
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn set_last_seq(&mut self, seq: u64) {
        self.last_seq = self.last_seq.max(seq);
    }

    /// Writes one entry; it is on disk when this returns.
    pub fn append<T: Serialize>(&mut self, operation: Operation, payload: &T) -> Result<TransactionLogEntry> {
        let entry = TransactionLogEntry::new(self.last_seq + 1, operation, payload)?;
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
            if self.fsync {
                f.sync_data()?;
            }
        }
        self.last_seq = entry.seq;
        Ok(entry)
    }

    /// Empties the log after a snapshot has made its entries redundant.
    pub fn truncate(&mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.set_len(0)?;
            use std::io::Seek;
            f.seek(std::io::SeekFrom::Start(0))?;
            if self.fsync {
                f.sync_all()?;
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8], fsync: bool) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if fsync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub enum BlobStore {
    Dir { root: PathBuf, fsync: bool },
    Memory(RwLock<HashMap<String, Arc<Vec<u8>>>>),
}

impl BlobStore {
    pub fn memory() -> Self {
        BlobStore::Memory(RwLock::new(HashMap::new()))
    }

    pub fn dir(root: PathBuf, fsync: bool) -> Result<Self> {
        fs::create_dir_all(&root)?;
        Ok(BlobStore::Dir { root, fsync })
    }

    /// Stores `bytes` under their SHA-256 and returns it.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let key = sha256_hex(bytes);
        match self {
            BlobStore::Dir { root, fsync } => {
                let path = root.join(&key);
                if !path.exists() {
                    write_atomic(&path, bytes, *fsync)?;
                }
            }
            BlobStore::Memory(m) => {
                m.write().entry(key.clone()).or_insert_with(|| Arc::new(bytes.to_vec()));
            }
        }
        Ok(key)
    }

    pub fn get(&self, key: &str) -> Result<Arc<Vec<u8>>> {
        if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::validation(format!("bad blob reference {key}")));
        }
        match self {
            BlobStore::Dir { root, .. } => match fs::read(root.join(key)) {
                Ok(b) => Ok(Arc::new(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::not_found(format!("blob {key}"))),
                Err(e) => Err(e.into()),
            },
            BlobStore::Memory(m) => m.read().get(key).cloned().ok_or_else(|| Error::not_found(format!("blob {key}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_stops_at_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let (mut log, e) = TxLog::open(&path, false).unwrap();
        assert!(e.is_empty());
        for i in 0..5 {
            log.append(Operation::Upsert, &serde_json::json!({ "i": i, "x": 0.1 * i as f64 })).unwrap();
        }
        drop(log);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(valid_prefix(&bytes).0.len(), 5);
        // torn final line
        assert_eq!(valid_prefix(&bytes[..bytes.len() - 3]).0.len(), 4);
        // flipped payload byte in entry 3
        let lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
        let off: usize = lines[..2].iter().map(|l| l.len() + 1).sum();
        let mut bad = bytes.clone();
        let i = off + lines[2].windows(3).position(|w| w == b"\"i\"").unwrap() + 4;
        bad[i] = b'9';
        assert_eq!(valid_prefix(&bad).0.len(), 2);
    }

    #[test]
    fn reopen_truncates_garbage_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let (mut log, _) = TxLog::open(&path, false).unwrap();
        log.append(Operation::Merge, &1).unwrap();
        log.append(Operation::Merge, &2).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":3,\"oper").unwrap();
        drop(f);
        let (mut log, e) = TxLog::open(&path, false).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(log.append(Operation::Merge, &3).unwrap().seq, 3);
        drop(log);
        assert_eq!(valid_prefix(&fs::read(&path).unwrap()).0.len(), 3);
    }

    #[test]
    fn blobs_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        for store in [BlobStore::memory(), BlobStore::dir(dir.path().join("b"), false).unwrap()] {
            let k = store.put(b"abc").unwrap();
            assert_eq!(k, sha256_hex(b"abc"));
            assert_eq!(store.put(b"abc").unwrap(), k);
            assert_eq!(store.get(&k).unwrap().as_slice(), b"abc");
            assert!(matches!(store.get(&sha256_hex(b"zzz")), Err(Error::NotFound(_))));
        }
    }
}
