//! Append-only replay cache for oracle calls.
//!
//! One JSON object per line:
//! `{"key": <hex sha256>, "kind": "nll"|"stats"|"gen", "request": ..., "response": ...}`.
//! Keys hash the oracle identity, the request kind and the exact request,
//! so switching models never hits stale entries. Each record is written and
//! flushed before the response is handed back.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{LossOracle, LossProfile, OracleCapabilities, PositionStats, ScoringContext};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Nll,
    Stats,
    Gen,
}

impl RequestKind {
    fn as_str(self) -> &'static str {
        match self {
            RequestKind::Nll => "nll",
            RequestKind::Stats => "stats",
            RequestKind::Gen => "gen",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    kind: RequestKind,
    request: Value,
    response: Value,
}

pub fn cache_key(identity: &str, kind: RequestKind, request: &Value) -> String {
    let mut h = Sha256::new();
    h.update(identity.as_bytes());
    h.update([0]);
    h.update(kind.as_str().as_bytes());
    h.update([0]);
    h.update(request.to_string().as_bytes());
    hex::encode(h.finalize())
}

pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, Value>>,
    file: Mutex<File>,
}

impl std::fmt::Debug for ResponseCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResponseCache").field("path", &self.path).finish()
    }
}

impl ResponseCache {
    /// Opens (or creates) the cache file and loads every complete record.
    /// A torn final line from an interrupted write is dropped from the file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        let mut truncate_to = None;
        if path.exists() {
            let raw = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let mut offset = 0;
            let mut line_no = 0;
            while offset < raw.len() {
                line_no += 1;
                let end = raw[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
                let line = &raw[offset..end.unwrap_or(raw.len())];
                let parsed = std::str::from_utf8(line)
                    .map_err(|e| e.to_string())
                    .and_then(|l| match l.trim() {
                        "" => Ok(None),
                        t => serde_json::from_str::<Record>(t).map(Some).map_err(|e| e.to_string()),
                    });
                match (parsed, end) {
                    (Ok(rec), _) => {
                        if let Some(rec) = rec {
                            entries.entry(rec.key).or_insert(rec.response);
                        }
                        needs_newline = end.is_none();
                    }
                    (Err(_), None) => {
                        log::warn!("{}: dropping incomplete final record", path.display());
                        truncate_to = Some(offset as u64);
                    }
                    (Err(e), Some(_)) => {
                        return Err(Error::format(&path, line_no, format!("bad cache record: {e}")));
                    }
                }
                offset = end.map_or(raw.len(), |e| e + 1);
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        if let Some(len) = truncate_to {
            file.set_len(len)
                .map_err(|e| Error::io(format!("truncating {}", path.display()), e))?;
        }
        if needs_newline {
            file.write_all(b"\n")
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(Self {
            path,
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    /// Persists a record and returns the canonical response for its key,
    /// which is the earlier one if another writer got there first.
    fn insert(&self, key: String, kind: RequestKind, request: Value, response: Value) -> Result<Value> {
        let mut file = self.file.lock().unwrap();
        if let Some(existing) = self.entries.lock().unwrap().get(&key) {
            return Ok(existing.clone());
        }
        let rec = Record {
            key: key.clone(),
            kind,
            request,
            response,
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(format!("appending to {}", self.path.display()), e))?;
        self.entries.lock().unwrap().insert(key, rec.response.clone());
        Ok(rec.response)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Serves oracle calls from a [`ResponseCache`], forwarding misses to the
/// wrapped oracle. Without an inner oracle every miss is an error.
pub struct CachedOracle {
    inner: Option<Arc<dyn LossOracle>>,
    identity: String,
    capabilities: OracleCapabilities,
    context_sensitive: bool,
    cache: Arc<ResponseCache>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedOracle {
    pub fn new(inner: Arc<dyn LossOracle>, cache: Arc<ResponseCache>) -> Self {
        Self {
            identity: inner.identity(),
            capabilities: inner.capabilities(),
            context_sensitive: inner.context_sensitive(),
            inner: Some(inner),
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Cache-only oracle answering as `identity`.
    pub fn replay(
        identity: impl Into<String>,
        capabilities: OracleCapabilities,
        context_sensitive: bool,
        cache: Arc<ResponseCache>,
    ) -> Self {
        Self {
            inner: None,
            identity: identity.into(),
            capabilities,
            context_sensitive,
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn lookup(
        &self,
        kind: RequestKind,
        request: Value,
        fetch: impl FnOnce(&dyn LossOracle) -> Result<Value>,
    ) -> Result<Value> {
        let key = cache_key(&self.identity, kind, &request);
        if let Some(v) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let inner = self.inner.as_deref().ok_or_else(|| {
            Error::Oracle(format!(
                "cache miss for {} request with no live oracle configured ({})",
                kind.as_str(),
                self.cache.path().display()
            ))
        })?;
        let response = fetch(inner)?;
        self.cache.insert(key, kind, request, response)
    }
}

impl LossOracle for CachedOracle {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn capabilities(&self) -> OracleCapabilities {
        self.capabilities
    }

    fn context_sensitive(&self) -> bool {
        self.context_sensitive
    }

    fn score_text(&self, text: &str) -> Result<LossProfile> {
        let v = self.lookup(RequestKind::Nll, json!({ "text": text }), |o| {
            Ok(serde_json::to_value(o.score_text(text)?)?)
        })?;
        Ok(serde_json::from_value(v)?)
    }

    fn score_in_context(&self, ctx: &ScoringContext<'_>, text: &str) -> Result<LossProfile> {
        if !self.context_sensitive {
            return self.score_text(text);
        }
        let request = json!({ "sample_id": ctx.sample_id, "text": text });
        let v = self.lookup(RequestKind::Nll, request, |o| {
            Ok(serde_json::to_value(o.score_in_context(ctx, text)?)?)
        })?;
        Ok(serde_json::from_value(v)?)
    }

    fn distribution_stats(&self, text: &str) -> Result<Vec<PositionStats>> {
        if !self.capabilities.vocab_distribution_stats {
            return Err(Error::Capability {
                capability: "vocab_distribution_stats",
                requester: "MIN-K%++",
            });
        }
        let v = self.lookup(RequestKind::Stats, json!({ "text": text }), |o| {
            Ok(serde_json::to_value(o.distribution_stats(text)?)?)
        })?;
        Ok(serde_json::from_value(v)?)
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        if !self.capabilities.generation {
            return Err(Error::Capability {
                capability: "generation",
                requester: "ROUGE-L",
            });
        }
        let request = json!({ "prompt": prompt, "max_new_tokens": max_new_tokens });
        let v = self.lookup(RequestKind::Gen, request, |o| {
            Ok(json!({ "text": o.generate(prompt, max_new_tokens)? }))
        })?;
        v.get("text")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Oracle("cached generation record lacks `text`".into()))
    }
}
