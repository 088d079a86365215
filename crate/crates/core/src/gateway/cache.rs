//! Content-addressed response cache.
//!
//! On disk: `<dir>/<role>/<first two hex chars of key>/<key>` holds the raw
//! response bytes and `<key>.meta.json` the sidecar [`CacheEntry`] metadata.
//! Entries are also kept in memory; a cache without a directory is
//! memory-only.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::Role;
use crate::records::{self, RecordError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub role: Role,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    pub size: usize,
}

#[derive(Debug)]
pub struct Cache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<(Role, String), Vec<u8>>>,
    write: Mutex<()>,
}

impl Cache {
    pub fn in_memory() -> Self {
        Self { dir: None, memory: RwLock::new(HashMap::new()), write: Mutex::new(()) }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::in_memory() }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(dir: &Path, role: Role, key: &str) -> PathBuf {
        dir.join(role.as_str()).join(&key[..2.min(key.len())]).join(key)
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, role: Role, key: &str) -> Result<Option<Vec<u8>>, RecordError> {
        if let Some(v) = self.memory.read().expect("cache lock").get(&(role, key.to_string())) {
            return Ok(Some(v.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = Self::entry_path(dir, role, key);
        match fs::read(&path) {
            Ok(bytes) => {
                self.memory
                    .write()
                    .expect("cache lock")
                    .insert((role, key.to_string()), bytes.clone());
                Ok(Some(bytes))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RecordError::io(path, e)),
        }
    }

    pub fn put(&self, role: Role, key: &str, model_id: &str, bytes: &[u8]) -> Result<(), RecordError> {
        let _guard = self.write.lock().expect("cache write lock");
        let mem_key = (role, key.to_string());
        if self.memory.read().expect("cache lock").contains_key(&mem_key) {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let path = Self::entry_path(dir, role, key);
            records::write_atomic(&path, bytes)?;
            let meta = CacheEntry {
                key: key.to_string(),
                role,
                model_id: model_id.to_string(),
                created_at: Utc::now(),
                size: bytes.len(),
            };
            records::write_json(&path.with_file_name(format!("{key}.meta.json")), &meta)?;
        }
        self.memory.write().expect("cache lock").insert(mem_key, bytes.to_vec());
        Ok(())
    }

    /// Sidecar metadata of a disk entry.
    pub fn entry(&self, role: Role, key: &str) -> Result<Option<CacheEntry>, RecordError> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = Self::entry_path(dir, role, key).with_file_name(format!("{key}.meta.json"));
        if !path.exists() {
            return Ok(None);
        }
        records::read_json(&path).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let key = "ab".repeat(32);
        {
            let c = Cache::on_disk(dir.path());
            c.put(Role::Chat, &key, "gpt", b"hello").unwrap();
        }
        let path = dir.path().join("chat").join("ab").join(&key);
        assert_eq!(fs::read(&path).unwrap(), b"hello");
        let fresh = Cache::on_disk(dir.path());
        assert_eq!(fresh.get(Role::Chat, &key).unwrap().as_deref(), Some(&b"hello"[..]));
        assert_eq!(fresh.get(Role::Vision, &key).unwrap(), None);
        let meta = fresh.entry(Role::Chat, &key).unwrap().unwrap();
        assert_eq!(meta.model_id, "gpt");
        assert_eq!(meta.size, 5);
    }
}
