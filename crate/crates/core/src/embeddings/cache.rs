use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::EmbedError;

pub type CacheKey = [u8; 32];

/// SHA-256 over the provider identity, a NUL separator and the exact text bytes.
pub fn cache_key(provider_identity: &str, text: &str) -> CacheKey {
    let mut h = Sha256::new();
    h.update(provider_identity.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Hex SHA-256 of the text alone, used in matrix sidecar indexes.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Disk-backed map from `(provider, text)` to a vector.
///
/// Each provider identity gets an append-only record file
/// (`key[32] | dim: u32 | dim * f32`, little-endian) that is read fully on
/// first use. Reads share a lock; appends are serialized.
#[derive(Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, Arc<[f32]>>>,
    loaded: Mutex<HashMap<String, Option<BufWriter<File>>>>,
}

impl EmbeddingCache {
    /// A cache that lives only as long as the value.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    fn file_for(dir: &Path, identity: &str) -> PathBuf {
        let tag = &hex::encode(Sha256::digest(identity.as_bytes()))[..16];
        dir.join(format!("{tag}.cache"))
    }

    /// Loads the record file for `identity` once and opens it for appending.
    fn ensure_loaded(&self, identity: &str) -> Result<(), EmbedError> {
        let mut loaded = self.loaded.lock().expect("cache lock poisoned");
        if loaded.contains_key(identity) {
            return Ok(());
        }
        let writer = match &self.dir {
            None => None,
            Some(dir) => {
                let path = Self::file_for(dir, identity);
                if path.exists() {
                    let records = read_records(&path)?;
                    let mut entries = self.entries.write().expect("cache lock poisoned");
                    for (k, v) in records {
                        entries.insert(k, v);
                    }
                }
                let file = OpenOptions::new().create(true).append(true).open(&path)?;
                Some(BufWriter::new(file))
            }
        };
        loaded.insert(identity.to_string(), writer);
        Ok(())
    }

    pub fn get(&self, identity: &str, text: &str) -> Result<Option<Arc<[f32]>>, EmbedError> {
        self.ensure_loaded(identity)?;
        let key = cache_key(identity, text);
        Ok(self
            .entries
            .read()
            .expect("cache lock poisoned")
            .get(&key)
            .cloned())
    }

    pub fn insert(&self, identity: &str, text: &str, vector: &[f32]) -> Result<(), EmbedError> {
        self.ensure_loaded(identity)?;
        let key = cache_key(identity, text);
        let mut loaded = self.loaded.lock().expect("cache lock poisoned");
        {
            let mut entries = self.entries.write().expect("cache lock poisoned");
            if entries.contains_key(&key) {
                return Ok(());
            }
            entries.insert(key, Arc::from(vector));
        }
        if let Some(Some(w)) = loaded.get_mut(identity) {
            w.write_all(&key)?;
            w.write_all(&(vector.len() as u32).to_le_bytes())?;
            for v in vector {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn read_records(path: &Path) -> Result<Vec<(CacheKey, Arc<[f32]>)>, EmbedError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if pos + 36 > bytes.len() {
            return Err(EmbedError::Format(format!(
                "{}: truncated cache record at byte {pos}",
                path.display()
            )));
        }
        let key: CacheKey = bytes[pos..pos + 32].try_into().expect("32 bytes");
        let dim = u32::from_le_bytes(bytes[pos + 32..pos + 36].try_into().expect("4 bytes")) as usize;
        pos += 36;
        let end = pos + dim * 4;
        if end > bytes.len() {
            return Err(EmbedError::Format(format!(
                "{}: truncated cache vector at byte {pos}",
                path.display()
            )));
        }
        let v: Vec<f32> = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((key, Arc::from(v)));
        pos = end;
    }
    Ok(out)
}
