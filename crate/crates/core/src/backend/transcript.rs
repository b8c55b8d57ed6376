//! Append-only transcript store and the replay backend built on it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{BackendError, ModelBackend, ModelRequest, ModelResponse, Provenance};
use crate::canonical::{sha256_hex, to_canonical_json};
use crate::types::Role;

/// One persisted exchange. The auth token is never part of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_hash: String,
    pub role: Role,
    pub model_id: String,
    pub response_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Inner {
    file: Option<File>,
    // first entry per hash wins
    index: HashMap<String, TranscriptEntry>,
    len: usize,
}

/// JSON-lines file of [`TranscriptEntry`], appended under a lock.
///
/// The in-memory index maps each request hash to its first recorded entry.
pub struct TranscriptStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl TranscriptStore {
    /// Opens (creating if needed) a store file and indexes existing lines.
    /// A trailing partial line left by an interrupted write is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(store_err)?;
            }
        }
        let mut index = HashMap::new();
        let mut len = 0;
        if path.exists() {
            drop_partial_tail(&path)?;
            for entry in read_entries(&path)? {
                len += 1;
                index.entry(entry.request_hash.clone()).or_insert(entry);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(store_err)?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner {
                file: Some(file),
                index,
                len,
            }),
        })
    }

    /// A store that never touches disk.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                file: None,
                index: HashMap::new(),
                len: 0,
            }),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn lookup(&self, request_hash: &str) -> Option<TranscriptEntry> {
        self.inner.lock().expect("store lock").index.get(request_hash).cloned()
    }

    pub fn append(&self, entry: TranscriptEntry) -> Result<(), BackendError> {
        let line = to_canonical_json(&entry).map_err(|e| BackendError::Store(e.to_string()))?;
        let mut inner = self.inner.lock().expect("store lock");
        if let Some(f) = inner.file.as_mut() {
            writeln!(f, "{line}").map_err(store_err)?;
            f.flush().map_err(store_err)?;
        }
        inner.len += 1;
        inner.index.entry(entry.request_hash.clone()).or_insert(entry);
        Ok(())
    }

    /// Number of appended entries, duplicates included.
    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Digest of the current file contents (empty string hash for memory stores).
    pub fn content_digest(&self) -> Result<String, BackendError> {
        match &self.path {
            Some(p) => Ok(sha256_hex(&std::fs::read(p).map_err(store_err)?)),
            None => Ok(sha256_hex(b"")),
        }
    }
}

// An interrupted write can leave bytes after the last newline; later appends
// must not be glued onto them.
fn drop_partial_tail(path: &Path) -> Result<(), BackendError> {
    let bytes = std::fs::read(path).map_err(store_err)?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        log::warn!(
            "dropping {} trailing bytes of an interrupted write in {}",
            bytes.len() - keep,
            path.display()
        );
        let f = OpenOptions::new().write(true).open(path).map_err(store_err)?;
        f.set_len(keep as u64).map_err(store_err)?;
    }
    Ok(())
}

fn store_err(e: std::io::Error) -> BackendError {
    BackendError::Store(e.to_string())
}

pub fn read_entries(path: &Path) -> Result<Vec<TranscriptEntry>, BackendError> {
    let reader = BufReader::new(File::open(path).map_err(store_err)?);
    let mut out = Vec::new();
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>().map_err(store_err)?;
    let n = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TranscriptEntry>(&line) {
            Ok(e) => out.push(e),
            Err(e) if i + 1 == n => {
                log::warn!("ignoring truncated last transcript line in {}: {e}", path.display());
            }
            Err(e) => return Err(BackendError::Store(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Serves recorded responses by request hash.
pub struct ReplayBackend {
    store: TranscriptStore,
    label: String,
}

impl ReplayBackend {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(BackendError::Config(format!(
                "transcript {} does not exist",
                path.display()
            )));
        }
        let store = TranscriptStore::open(path)?;
        let label = format!("replay:{}", &store.content_digest()?[..16]);
        Ok(Self { store, label })
    }

    pub fn from_store(store: TranscriptStore) -> Self {
        let label = format!(
            "replay:{}",
            store
                .path()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "memory".into())
        );
        Self { store, label }
    }
}

impl ModelBackend for ReplayBackend {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let hash = request.hash()?;
        let entry = self.store.lookup(&hash).ok_or(BackendError::ReplayMiss(hash))?;
        Ok(ModelResponse {
            text: entry.response_text,
            latency_ms: entry.latency_ms,
            provenance: Provenance::Replay,
            attempts: 1,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Wraps a backend and appends every response it produces to a store.
pub struct RecordingBackend<B> {
    inner: B,
    store: std::sync::Arc<TranscriptStore>,
    model_id: String,
}

impl<B: ModelBackend> RecordingBackend<B> {
    pub fn new(inner: B, store: std::sync::Arc<TranscriptStore>, model_id: impl Into<String>) -> Self {
        Self {
            inner,
            store,
            model_id: model_id.into(),
        }
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let resp = self.inner.complete(request)?;
        self.store.append(TranscriptEntry {
            request_hash: request.hash()?,
            role: request.role,
            model_id: self.model_id.clone(),
            response_text: resp.text.clone(),
            latency_ms: resp.latency_ms,
            timestamp_ms: None,
        })?;
        Ok(resp)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}
