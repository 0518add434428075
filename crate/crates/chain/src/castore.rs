//! Content-addressed blob store: `put` returns a digest, `get` verifies
//! integrity, nothing is ever mutated. Backed by an in-memory map with
//! optional directory persistence (`<root>/<first-2-hex>/<digest>`).

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty blobs are not storable")]
    EmptyBlob,
    #[error("no blob with digest {0}")]
    NotFound(String),
    #[error("integrity failure for {digest}: stored bytes hash to {actual}")]
    Integrity { digest: String, actual: String },
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediaTag {
    Dataset,
    Model,
    EncryptedModel,
    MetamodelManifest,
}

/// Immutable handle to stored content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentRef {
    /// SHA-256 of the blob, lowercase hex.
    pub digest: String,
    pub size: u64,
    pub tag: MediaTag,
}

/// Thread-safe store; racing `put`s of identical bytes converge on one entry.
pub struct CaStore {
    blobs: RwLock<HashMap<String, Arc<Vec<u8>>>>,
    root: Option<PathBuf>,
}

impl CaStore {
    pub fn in_memory() -> Self {
        CaStore { blobs: RwLock::new(HashMap::new()), root: None }
    }

    /// Directory-backed store; blobs are additionally written to disk and
    /// found there on cache misses.
    pub fn with_dir(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(CaStore { blobs: RwLock::new(HashMap::new()), root: Some(root) })
    }

    fn blob_path(&self, digest: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(&digest[..2]).join(digest))
    }

    pub fn put(&self, blob: &[u8], tag: MediaTag) -> Result<ContentRef> {
        if blob.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let digest = crate::sha256_hex(blob);
        {
            let mut map = self.blobs.write().expect("store lock");
            map.entry(digest.clone()).or_insert_with(|| Arc::new(blob.to_vec()));
        }
        if let Some(path) = self.blob_path(&digest) {
            if !path.exists() {
                std::fs::create_dir_all(path.parent().expect("sharded path"))?;
                let tmp = path.with_extension("tmp");
                std::fs::write(&tmp, blob)?;
                std::fs::rename(&tmp, &path)?;
            }
        }
        Ok(ContentRef { digest, size: blob.len() as u64, tag })
    }

    pub fn get(&self, reference: &ContentRef) -> Result<Vec<u8>> {
        self.get_by_digest(&reference.digest)
    }

    pub fn get_by_digest(&self, digest: &str) -> Result<Vec<u8>> {
        if let Some(blob) = self.blobs.read().expect("store lock").get(digest) {
            return self.verified(digest, blob.as_ref().clone());
        }
        if let Some(path) = self.blob_path(digest) {
            if path.exists() {
                let bytes = std::fs::read(&path)?;
                let bytes = self.verified(digest, bytes)?;
                self.blobs
                    .write()
                    .expect("store lock")
                    .insert(digest.to_string(), Arc::new(bytes.clone()));
                return Ok(bytes);
            }
        }
        Err(StoreError::NotFound(digest.to_string()))
    }

    fn verified(&self, digest: &str, bytes: Vec<u8>) -> Result<Vec<u8>> {
        let actual = crate::sha256_hex(&bytes);
        if actual != digest {
            return Err(StoreError::Integrity { digest: digest.to_string(), actual });
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.blobs.read().expect("store lock").contains_key(digest)
            || self.blob_path(digest).is_some_and(|p| p.exists())
    }

    pub fn len(&self) -> usize {
        self.blobs.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
