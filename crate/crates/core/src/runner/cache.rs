//! Content-addressed response store.
//!
//! Entries are keyed by the digest from [`super::cache_key`] and hold
//! everything needed to rebuild a trial byte-for-byte: the subject
//! response, usage, cost, retry count, the original timestamp, and any
//! judge exchange. Writes go through a temp file and rename, so a
//! killed run never leaves a torn entry.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::UsdMicros;

/// One upstream call as cached: text plus its cost and retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCall {
    pub text: String,
    pub cost_usd: UsdMicros,
    pub retries: u32,
}

/// The judge exchange for an `llm_judge` cell: one attempt normally,
/// two when the first verdict did not parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedJudge {
    pub model_id: String,
    pub attempts: Vec<CachedCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCell {
    pub response: String,
    pub completion_chars: u64,
    pub subject_cost: UsdMicros,
    pub subject_retries: u32,
    /// Timestamp of the original call; replays reuse it.
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<CachedJudge>,
}

/// Thread-safe store, memory-backed with optional directory persistence.
pub struct CacheStore {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, CachedCell>>,
}

impl CacheStore {
    /// Open (creating if needed) a persistent cache directory.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(CacheStore {
            dir: Some(dir),
            mem: Mutex::new(HashMap::new()),
        })
    }

    /// Purely in-memory store, for tests and throwaway runs.
    pub fn in_memory() -> Self {
        CacheStore {
            dir: None,
            mem: Mutex::new(HashMap::new()),
        }
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<CachedCell> {
        if let Some(hit) = self.mem.lock().unwrap().get(key) {
            return Some(hit.clone());
        }
        let path = self.path_for(key)?;
        let text = fs::read_to_string(path).ok()?;
        let cell: CachedCell = serde_json::from_str(&text).ok()?;
        self.mem
            .lock()
            .unwrap()
            .insert(key.to_string(), cell.clone());
        Some(cell)
    }

    pub fn put(&self, key: &str, cell: &CachedCell) -> io::Result<()> {
        self.mem
            .lock()
            .unwrap()
            .insert(key.to_string(), cell.clone());
        if let Some(path) = self.path_for(key) {
            let parent = path.parent().expect("cache entry has parent dir");
            fs::create_dir_all(parent)?;
            let tmp = path.with_extension("tmp");
            let json = serde_json::to_string(cell)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            fs::write(&tmp, json)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    /// Entries currently resident in memory (disk entries count once
    /// loaded).
    pub fn len(&self) -> usize {
        self.mem.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
