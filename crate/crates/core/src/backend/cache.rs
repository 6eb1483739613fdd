use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, Completion, CompletionRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CompletionRequest,
    pub completion: Completion,
    pub created_at: DateTime<Utc>,
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Compact JSON of the request with object keys sorted at every level.
/// Floats use the shortest text that round-trips.
pub fn canonical_json(request: &CompletionRequest) -> String {
    let value = serde_json::to_value(request).expect("request is always serializable");
    serde_json::to_string(&sort_keys(value)).expect("value is always serializable")
}

/// Hex SHA-256 of [`canonical_json`].
pub fn cache_key(request: &CompletionRequest) -> String {
    hex::encode(Sha256::digest(canonical_json(request).as_bytes()))
}

/// Directory of `{key}.json` files. Reads run concurrently; writes are
/// serialized and land via rename so readers never see a partial file.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        match fs::read(self.path(key)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, request: &CompletionRequest, completion: &Completion) -> Result<CacheEntry> {
        let entry = CacheEntry {
            key: cache_key(request),
            request: request.clone(),
            completion: completion.clone(),
            created_at: Utc::now(),
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.dir.join(format!(".{}.tmp", entry.key));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, &entry)?;
            f.write_all(b"\n")?;
        }
        fs::rename(&tmp, self.path(&entry.key))?;
        Ok(entry)
    }
}

/// Serves repeated requests from a [`ResponseCache`].
///
/// In offline mode a miss is an error and the inner backend is never called.
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
    offline: bool,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        CachedBackend {
            inner,
            cache,
            offline: false,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let key = cache_key(request);
        if let Some(entry) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(entry.completion);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        if self.offline {
            return Err(Error::CacheMiss(key));
        }
        let completion = self.inner.complete(request)?;
        self.cache.put(request, &completion)?;
        Ok(completion)
    }
}
