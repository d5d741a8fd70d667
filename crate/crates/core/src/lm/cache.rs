use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::backend::{send_chat, ChatBackend, RetryPolicy};
use super::{request_digest, LmError, LmMode, LmRequest, LmResponse};

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub request: LmRequest,
    pub response: LmResponse,
}

/// Content-addressed response store backed by an append-only JSON-lines
/// journal. The in-memory index is only updated after the journal line has
/// been written, so readers never see an entry that is not on disk.
#[derive(Debug)]
pub struct ReplayCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<String, LmResponse>>,
    journal: Mutex<Option<File>>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: RwLock::new(HashMap::new()),
            journal: Mutex::new(None),
        }
    }

    /// Open (or create) the journal at `path` and load every complete entry.
    /// A torn trailing line from an interrupted writer is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| LmError::Cache(e.to_string()))?;
        }
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| LmError::Cache(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| LmError::Cache(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        index.insert(entry.digest, entry.response);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache entry: {e}", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LmError::Cache(e.to_string()))?;
        Ok(Self {
            path: Some(path),
            index: RwLock::new(index),
            journal: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<LmResponse> {
        self.index.read().get(digest).cloned()
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.index.read().contains_key(digest)
    }

    /// Append one entry; the whole line goes out in a single write.
    pub fn insert(&self, request: &LmRequest, response: &LmResponse) -> Result<String, LmError> {
        let digest = request_digest(request);
        let entry = CacheEntry {
            digest: digest.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| LmError::Cache(e.to_string()))?;
        line.push('\n');
        let mut journal = self.journal.lock();
        if let Some(file) = journal.as_mut() {
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| LmError::Cache(e.to_string()))?;
        }
        self.index.write().insert(digest.clone(), response.clone());
        Ok(digest)
    }
}

/// Route a request through the cache according to `mode`:
/// record calls the backend and persists, replay answers only from the cache,
/// passthrough calls the backend and stores nothing.
pub fn cached_send(
    request: &LmRequest,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    cache: &ReplayCache,
    mode: LmMode,
) -> Result<LmResponse, LmError> {
    match mode {
        LmMode::Replay => {
            let digest = request_digest(request);
            cache.get(&digest).ok_or(LmError::CacheMiss { digest })
        }
        LmMode::Record => {
            let response = send_chat(request, backend, retry)?;
            cache.insert(request, &response)?;
            Ok(response)
        }
        LmMode::Passthrough => send_chat(request, backend, retry),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::mock::ScriptedBackend;
    use crate::lm::ChatMessage;

    fn request(i: usize) -> LmRequest {
        LmRequest::new("m", vec![ChatMessage::user(format!("sentence {i}"))])
    }

    fn echo() -> ScriptedBackend {
        ScriptedBackend::from_fn(|r| Ok(format!("echo: {}", crate::lm::mock::target_text(r))))
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = echo();
        let policy = RetryPolicy::immediate(1);
        let recorded = {
            let cache = ReplayCache::open(&path).unwrap();
            cached_send(&request(1), &backend, &policy, &cache, LmMode::Record).unwrap()
        };
        let cache = ReplayCache::open(&path).unwrap();
        let replayed = cached_send(&request(1), &backend, &policy, &cache, LmMode::Replay).unwrap();
        assert_eq!(recorded, replayed);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn replay_miss_names_digest() {
        let cache = ReplayCache::in_memory();
        let backend = echo();
        let err = cached_send(&request(9), &backend, &RetryPolicy::immediate(1), &cache, LmMode::Replay).unwrap_err();
        match err {
            LmError::CacheMiss { digest } => assert_eq!(digest, request_digest(&request(9))),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn passthrough_does_not_store() {
        let cache = ReplayCache::in_memory();
        let backend = echo();
        cached_send(&request(2), &backend, &RetryPolicy::immediate(1), &cache, LmMode::Passthrough).unwrap();
        assert!(cache.is_empty());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ReplayCache::open(&path).unwrap();
            let backend = echo();
            for i in 0..3 {
                cached_send(&request(i), &backend, &RetryPolicy::immediate(1), &cache, LmMode::Record).unwrap();
            }
        }
        let mut file = OpenOptions::new().append(true).open(&path).unwrap();
        file.write_all(b"{\"digest\":\"abc\",\"requ").unwrap();
        drop(file);
        let cache = ReplayCache::open(&path).unwrap();
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn concurrent_appends_produce_whole_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ReplayCache::open(&path).unwrap();
        let backend = echo();
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = &cache;
                let backend = &backend;
                s.spawn(move || {
                    for i in 0..25 {
                        let r = request(t * 100 + i);
                        cached_send(&r, backend, &RetryPolicy::immediate(1), cache, LmMode::Record).unwrap();
                        assert!(cache.contains(&request_digest(&r)));
                    }
                });
            }
        });
        drop(cache);
        let reopened = ReplayCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 200);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 200);
        for line in text.lines() {
            serde_json::from_str::<CacheEntry>(line).unwrap();
        }
    }
}
