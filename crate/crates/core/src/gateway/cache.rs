//! Content-addressed response cache, persisted as an append-only JSON-lines
//! file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::wire::{WireRequest, WireResponse};
use crate::error::Result;

pub const CACHE_DIR_ENV: &str = "CASCADE_CACHE_DIR";
pub const CACHE_FILE: &str = "responses.jsonl";

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    backend_id: String,
    response: WireResponse,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, WireResponse>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) the cache file in `dir`, loading prior entries.
    /// A torn final line from an interrupted write is ignored.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.response);
                    }
                    Err(e) => {
                        log::warn!("skipping unreadable cache line in {}: {e}", path.display())
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ResponseCache {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    /// Cache directory: explicit setting first, then `CASCADE_CACHE_DIR`.
    pub fn resolve_dir(configured: Option<&Path>) -> Option<PathBuf> {
        configured
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn key(backend_id: &str, request: &WireRequest) -> String {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0u8]);
        // slots is a BTreeMap, so the encoding is canonical
        h.update(serde_json::to_vec(request).expect("wire request serializes"));
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<WireResponse> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: String, backend_id: &str, response: &WireResponse) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let mut line = serde_json::to_vec(&CacheLine {
                key: key.clone(),
                backend_id: backend_id.to_string(),
                response: response.clone(),
            })?;
            line.push(b'\n');
            file.lock().unwrap().write_all(&line)?;
        }
        entries.insert(key, response.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
