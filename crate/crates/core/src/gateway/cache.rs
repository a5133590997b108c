use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};

use super::{CompletionRecord, GatewayError};

/// Append-only JSON-lines cache of completion records keyed by request digest.
///
/// Readers share a lock; appends are serialized through the file handle.
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CompletionRecord>>,
    file: Mutex<File>,
}

impl ResponseCache {
    /// Opens (or creates) a cache file and loads every record in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            for (line, record) in read_records(&path)? {
                insert_checked(&mut entries, record, &path, line)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ResponseCache {
            path,
            entries: RwLock::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, digest: &str) -> Option<CompletionRecord> {
        self.entries.read().get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a record. A second record for a known digest is dropped if it
    /// carries the same text and rejected otherwise.
    pub fn insert(&self, record: CompletionRecord) -> Result<(), GatewayError> {
        let mut entries = self.entries.write();
        if let Some(existing) = entries.get(&record.request_digest) {
            if existing.response_text == record.response_text {
                return Ok(());
            }
            return Err(GatewayError::DigestCollision {
                digest: record.request_digest,
            });
        }
        append_line(&self.file, &record)?;
        entries.insert(record.request_digest.clone(), record);
        Ok(())
    }
}

fn insert_checked(
    entries: &mut HashMap<String, CompletionRecord>,
    record: CompletionRecord,
    path: &Path,
    line: usize,
) -> Result<(), GatewayError> {
    match entries.get(&record.request_digest) {
        Some(existing) if existing.response_text != record.response_text => {
            Err(GatewayError::CorruptCache {
                path: path.display().to_string(),
                line,
                reason: format!(
                    "digest {} already maps to another response",
                    record.request_digest
                ),
            })
        }
        Some(_) => Ok(()),
        None => {
            entries.insert(record.request_digest.clone(), record);
            Ok(())
        }
    }
}

/// Reads every record in a JSON-lines file, with 1-based line numbers.
pub(crate) fn read_records(path: &Path) -> Result<Vec<(usize, CompletionRecord)>, GatewayError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| GatewayError::CorruptCache {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn append_line(file: &Mutex<File>, record: &CompletionRecord) -> Result<(), GatewayError> {
    let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
    line.push('\n');
    let mut f = file.lock();
    f.write_all(line.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Append-only log of every completion served, in the cache's record format.
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AuditLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &CompletionRecord) -> Result<(), GatewayError> {
        append_line(&self.file, record)
    }

    pub fn records(&self) -> Result<Vec<CompletionRecord>, GatewayError> {
        Ok(read_records(&self.path)?
            .into_iter()
            .map(|(_, r)| r)
            .collect())
    }
}
