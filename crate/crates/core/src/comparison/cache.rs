//! Append-only JSON-Lines store of raw engine replies.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache {path} line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub query_id: String,
    pub reference_id: String,
    pub prompt_sha256: String,
    pub raw_response: String,
    pub created_at: String,
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// `hex(sha256("{query_id}|{reference_id}|{prompt_sha256}"))`
pub fn cache_key(query_id: &str, reference_id: &str, prompt_sha256: &str) -> String {
    hex::encode(Sha256::digest(
        format!("{query_id}|{reference_id}|{prompt_sha256}").as_bytes(),
    ))
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<(PathBuf, File)>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a cache file; existing records are loaded
    /// and new ones appended. Later records override earlier ones.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_owned(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| CacheError::Malformed {
                        path: path.to_owned(),
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                entries.insert(rec.key, rec.raw_response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some((path.to_owned(), file))),
            ..Default::default()
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let found = self.entries.read().unwrap().get(key).cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(
        &self,
        query_id: &str,
        reference_id: &str,
        prompt_sha256: &str,
        raw_response: &str,
    ) -> Result<(), CacheError> {
        let rec = CacheRecord {
            key: cache_key(query_id, reference_id, prompt_sha256),
            query_id: query_id.to_string(),
            reference_id: reference_id.to_string(),
            prompt_sha256: prompt_sha256.to_string(),
            raw_response: raw_response.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        // one writer at a time; the map update happens under the same lock
        let mut w = self.writer.lock().unwrap();
        if let Some((path, file)) = w.as_mut() {
            let mut line = serde_json::to_string(&rec).expect("cache record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|source| CacheError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(rec.key, rec.raw_response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.jsonl");
        let digest = prompt_digest("prompt");
        let key = cache_key("q1", "r1", &digest);
        {
            let c = ResponseCache::open(&p).unwrap();
            assert!(c.get(&key).is_none());
            c.insert("q1", "r1", &digest, "Answer: A").unwrap();
            assert_eq!(c.get(&key).as_deref(), Some("Answer: A"));
            assert_eq!((c.hits(), c.misses()), (1, 1));
        }
        let c = ResponseCache::open(&p).unwrap();
        assert_eq!(c.get(&key).as_deref(), Some("Answer: A"));
        let line = std::fs::read_to_string(&p).unwrap();
        let rec: CacheRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(rec.key, key);
        assert_eq!(rec.prompt_sha256, digest);
        assert!(chrono::DateTime::parse_from_rfc3339(&rec.created_at).is_ok());
    }

    #[test]
    fn key_depends_on_prompt() {
        assert_ne!(
            cache_key("q", "r", &prompt_digest("v1")),
            cache_key("q", "r", &prompt_digest("v2"))
        );
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.jsonl");
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(
            ResponseCache::open(&p),
            Err(CacheError::Malformed { line: 1, .. })
        ));
    }
}
