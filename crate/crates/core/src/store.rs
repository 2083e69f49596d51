//! Content-addressed object storage.
//!
//! Objects live at `objects/<first 2 hex>/<remaining 62 hex>` under the store
//! root and are named by the SHA-256 of their bytes. Writes go through a
//! temporary file followed by a rename, so readers never observe a partial
//! object.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::hash::ObjectHash;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("object {0} not found")]
    ObjectNotFound(ObjectHash),
    #[error("object {expected} is corrupt (content hashes to {actual})")]
    ObjectCorrupt { expected: ObjectHash, actual: ObjectHash },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io { path: path.into(), source }
    }
}

/// Read access to a set of content-addressed objects.
pub trait ObjectSource: Sync {
    /// Returns the bytes stored under `hash`, verifying that they still hash
    /// to `hash`.
    fn get(&self, hash: &ObjectHash) -> Result<Vec<u8>, StoreError>;

    fn contains(&self, hash: &ObjectHash) -> bool;
}

/// A directory of immutable objects.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ObjectStore {
    /// Opens (creating if needed) the store rooted at `dir`; objects go under
    /// `dir/objects`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = dir.as_ref().join("objects");
        fs::create_dir_all(&root).map_err(|e| StoreError::io(&root, e))?;
        Ok(ObjectStore { root })
    }

    pub fn objects_dir(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, hash: &ObjectHash) -> PathBuf {
        let hex = hash.to_hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    /// Stores `bytes` and returns their hash. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<ObjectHash, StoreError> {
        let hash = ObjectHash::of(bytes);
        self.put_verified(&hash, bytes)?;
        Ok(hash)
    }

    /// Stores bytes already known to hash to `hash`.
    pub(crate) fn put_verified(&self, hash: &ObjectHash, bytes: &[u8]) -> Result<bool, StoreError> {
        let path = self.path_of(hash);
        if path.exists() {
            return Ok(false);
        }
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            StoreError::io(&path, e)
        })?;
        Ok(true)
    }

    /// Deletes an object. Only derivative data and checkpoints are ever
    /// removed, and they can be recomputed.
    pub fn remove(&self, hash: &ObjectHash) -> Result<bool, StoreError> {
        let path = self.path_of(hash);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(StoreError::io(path, e)),
        }
    }

    /// Every object name present in the store, sorted.
    pub fn list(&self) -> Result<Vec<ObjectHash>, StoreError> {
        let mut out = Vec::new();
        let dirs = fs::read_dir(&self.root).map_err(|e| StoreError::io(&self.root, e))?;
        for dir in dirs {
            let dir = dir.map_err(|e| StoreError::io(&self.root, e))?;
            let prefix = dir.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !dir.path().is_dir() {
                continue;
            }
            let entries = fs::read_dir(dir.path()).map_err(|e| StoreError::io(dir.path(), e))?;
            for entry in entries {
                let entry = entry.map_err(|e| StoreError::io(dir.path(), e))?;
                let name = format!("{prefix}{}", entry.file_name().to_string_lossy());
                if let Ok(h) = ObjectHash::parse(&name) {
                    out.push(h);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

impl ObjectSource for ObjectStore {
    fn get(&self, hash: &ObjectHash) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::ObjectNotFound(*hash))
            }
            Err(e) => return Err(StoreError::io(path, e)),
        };
        let actual = ObjectHash::of(&bytes);
        if actual != *hash {
            return Err(StoreError::ObjectCorrupt { expected: *hash, actual });
        }
        Ok(bytes)
    }

    fn contains(&self, hash: &ObjectHash) -> bool {
        self.path_of(hash).is_file()
    }
}

/// Verified objects held in memory on top of a backing source. Used to stage
/// fetched objects until the chain they belong to validates.
pub struct Overlay<'a> {
    base: &'a dyn ObjectSource,
    staged: HashMap<ObjectHash, Vec<u8>>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a dyn ObjectSource) -> Self {
        Overlay { base, staged: HashMap::new() }
    }

    /// Stages bytes under `hash`, rejecting them if they do not hash to it.
    pub fn stage(&mut self, hash: ObjectHash, bytes: Vec<u8>) -> Result<(), StoreError> {
        let actual = ObjectHash::of(&bytes);
        if actual != hash {
            return Err(StoreError::ObjectCorrupt { expected: hash, actual });
        }
        self.staged.insert(hash, bytes);
        Ok(())
    }

    pub fn is_staged(&self, hash: &ObjectHash) -> bool {
        self.staged.contains_key(hash)
    }

    pub fn into_staged(self) -> HashMap<ObjectHash, Vec<u8>> {
        self.staged
    }
}

impl ObjectSource for Overlay<'_> {
    fn get(&self, hash: &ObjectHash) -> Result<Vec<u8>, StoreError> {
        match self.staged.get(hash) {
            Some(bytes) => Ok(bytes.clone()),
            None => self.base.get(hash),
        }
    }

    fn contains(&self, hash: &ObjectHash) -> bool {
        self.staged.contains_key(hash) || self.base.contains(hash)
    }
}
