//! Transcript replay and recording.
//!
//! A transcript is line-delimited JSON: a `{"schema_version":1,"kind":"transcript"}`
//! header, then one [`TranscriptEntry`] per line. Entries are keyed by
//! [`request_key`]; an entry with key `"*"` answers every request that has no
//! exact entry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{count_tokens, Backend, BackendKind, CompletionRequest, CompletionResponse, GatewayError};
use crate::dataset::hex;
use crate::jsonl;

pub const WILDCARD_KEY: &str = "*";
const KIND: &str = "transcript";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub text: String,
    /// Id of the backend that produced the text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

/// SHA-256 over the system text, a NUL separator and the user text; the
/// sampling seed is appended when present.
pub fn request_key(req: &CompletionRequest) -> String {
    let mut h = Sha256::new();
    h.update(req.system_text.as_bytes());
    h.update([0u8]);
    h.update(req.user_text.as_bytes());
    if let Some(seed) = req.seed {
        h.update([0u8]);
        h.update(seed.to_le_bytes());
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone)]
pub struct ReplayBackend {
    entries: BTreeMap<String, String>,
    id: String,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let entries: Vec<TranscriptEntry> = jsonl::read(path, KIND).map_err(|e| GatewayError::Transcript {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_entries(entries, &path.display().to_string()))
    }

    /// `fallback_id` names the backend when the entries do not record one.
    pub fn from_entries(entries: Vec<TranscriptEntry>, fallback_id: &str) -> Self {
        let id = entries
            .iter()
            .find_map(|e| e.backend.clone())
            .unwrap_or_else(|| format!("replay:{fallback_id}"));
        ReplayBackend {
            entries: entries.into_iter().map(|e| (e.key, e.text)).collect(),
            id,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.validate()?;
        let key = request_key(req);
        let text = self
            .entries
            .get(&key)
            .or_else(|| self.entries.get(WILDCARD_KEY))
            .ok_or(GatewayError::TranscriptMiss(key))?;
        Ok(CompletionResponse {
            token_count: count_tokens(text),
            text: text.clone(),
            latency_ms: 0.0,
        })
    }
}

/// Wraps a backend and remembers every exchange so it can be saved as a
/// transcript. Reports the inner backend's id and kind.
pub struct Recorder {
    inner: Arc<dyn Backend>,
    log: Mutex<BTreeMap<String, String>>,
}

impl Recorder {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Recorder {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        let id = self.inner.id();
        self.log
            .lock()
            .expect("recorder lock")
            .iter()
            .map(|(k, t)| TranscriptEntry {
                key: k.clone(),
                text: t.clone(),
                backend: Some(id.clone()),
            })
            .collect()
    }

    /// Writes entries sorted by key, so equal runs give equal files.
    pub fn save(&self, path: &Path) -> Result<PathBuf, GatewayError> {
        jsonl::write(path, KIND, &self.entries()).map_err(|e| GatewayError::Transcript {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(path.to_path_buf())
    }
}

impl Backend for Recorder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let resp = self.inner.complete(req)?;
        self.log
            .lock()
            .expect("recorder lock")
            .insert(request_key(req), resp.text.clone());
        Ok(resp)
    }
}
