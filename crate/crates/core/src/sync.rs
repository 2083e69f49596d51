//! Sharing datasets through a repository directory.
//!
//! A repository is `objects/` (same layout as a workspace store) plus
//! `refs/<dataset id>` files holding a hex head and a newline. Trust lives
//! in the hashes: pulled objects are staged in memory and the whole chain is
//! validated before any of them touches the local store.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::chain::{validate, Chain, DatasetId, MetadataBlock, MetadataEvent, ValidateOptions};
use crate::coordinator::{CoordinatorError, Workspace};
use crate::hash::ObjectHash;
use crate::store::{ObjectSource, ObjectStore, Overlay, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("remote head {remote} is not an ancestor of {local}")]
    NonFastForward { remote: ObjectHash, local: ObjectHash },
    #[error("repository rejected: {0}")]
    InvalidChain(String),
    #[error("object {0} is missing from the repository")]
    ObjectMissingInRepo(ObjectHash),
    #[error("repository unavailable at {path}: {reason}")]
    RepoUnavailable { path: PathBuf, reason: String },
    #[error("repository has no ref for {0}")]
    NoSuchRef(DatasetId),
    #[error("ref {0} changed during the update")]
    RefRace(DatasetId),
    #[error(transparent)]
    Local(#[from] CoordinatorError),
}

pub type Result<T, E = SyncError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferReport {
    pub dataset_id: DatasetId,
    pub head: ObjectHash,
    pub objects_transferred: u64,
    /// False when both sides already agreed.
    pub head_changed: bool,
}

/// A repository directory.
pub struct Repo {
    root: PathBuf,
    store: ObjectStore,
}

impl Repo {
    /// Opens a repository, creating its layout if `create` is set.
    pub fn open(root: impl AsRef<Path>, create: bool) -> Result<Repo> {
        let root = root.as_ref().to_path_buf();
        let unavailable = |reason: String| SyncError::RepoUnavailable { path: root.clone(), reason };
        if !create && !root.join("objects").is_dir() {
            return Err(unavailable("no objects directory".into()));
        }
        let store = ObjectStore::open(&root).map_err(|e| unavailable(e.to_string()))?;
        fs::create_dir_all(root.join("refs")).map_err(|e| unavailable(e.to_string()))?;
        Ok(Repo { root, store })
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    fn ref_path(&self, id: &DatasetId) -> PathBuf {
        self.root.join("refs").join(id.to_string())
    }

    pub fn read_ref(&self, id: &DatasetId) -> Result<Option<ObjectHash>> {
        let path = self.ref_path(id);
        match fs::read_to_string(&path) {
            Ok(text) => ObjectHash::parse(text.trim_end_matches('\n'))
                .map(Some)
                .map_err(|e| SyncError::InvalidChain(format!("ref {id}: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(self.unavailable(e)),
        }
    }

    fn unavailable(&self, e: impl ToString) -> SyncError {
        SyncError::RepoUnavailable { path: self.root.clone(), reason: e.to_string() }
    }

    /// Moves `refs/<id>` from `expected` to `new`. The `.lock` file makes the
    /// read-compare-write atomic with respect to other writers.
    fn compare_and_set(&self, id: &DatasetId, expected: Option<ObjectHash>, new: &ObjectHash) -> Result<()> {
        let path = self.ref_path(id);
        let lock = path.with_extension("lock");
        let mut f = match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(SyncError::RefRace(*id)),
            Err(e) => return Err(self.unavailable(e)),
        };
        let result = (|| {
            if self.read_ref(id)? != expected {
                return Err(SyncError::RefRace(*id));
            }
            f.write_all(format!("{new}\n").as_bytes()).map_err(|e| self.unavailable(e))?;
            f.sync_all().map_err(|e| self.unavailable(e))?;
            fs::rename(&lock, &path).map_err(|e| self.unavailable(e))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&lock);
        }
        result
    }
}

/// Every object a chain references: blocks, slices, checkpoints.
fn referenced(blocks: &[MetadataBlock]) -> (Vec<ObjectHash>, Vec<ObjectHash>, Vec<ObjectHash>) {
    let mut b = Vec::new();
    let mut s = Vec::new();
    let mut c = Vec::new();
    for block in blocks {
        b.push(block.block_hash);
        if let Some(slice) = block.event.output_slice() {
            s.push(slice.slice_hash);
        }
        if let MetadataEvent::ExecuteTransform { new_checkpoint: Some(cp), .. } = &block.event {
            c.push(*cp);
        }
    }
    (b, s, c)
}

/// Copies the dataset's blocks, slices and present checkpoints into the
/// repository, then fast-forwards its ref.
pub fn push(ws: &Workspace, id: &DatasetId, repo_path: &Path) -> Result<TransferReport> {
    let repo = Repo::open(repo_path, true)?;
    ws.materialize(id)?;
    let local_head = ws.head(id)?.ok_or_else(|| CoordinatorError::UnknownDataset(id.to_string()))?;
    let report = validate(ws.store(), &local_head, ValidateOptions::default());
    if let Some(f) = report.failure {
        return Err(SyncError::InvalidChain(format!("local dataset is invalid: {f}")));
    }
    let chain = ws.chain(id).map_err(SyncError::Local)?;
    let remote = repo.read_ref(id)?;
    if let Some(r) = remote {
        if !chain.blocks().iter().any(|b| b.block_hash == r) {
            return Err(SyncError::NonFastForward { remote: r, local: local_head });
        }
    }

    let (blocks, slices, checkpoints) = referenced(chain.blocks());
    let mut transferred = 0;
    let objects = blocks.iter().chain(&slices).map(|h| (h, true)).chain(checkpoints.iter().map(|h| (h, false)));
    for (hash, required) in objects {
        if repo.store.contains(hash) {
            continue;
        }
        let bytes = match ws.store().get(hash) {
            Ok(b) => b,
            Err(StoreError::ObjectNotFound(_)) if !required => continue,
            Err(e) => return Err(CoordinatorError::from(e).into()),
        };
        repo.store.put(&bytes).map_err(|e| repo.unavailable(e))?;
        transferred += 1;
    }
    let head_changed = remote != Some(local_head);
    if head_changed {
        repo.compare_and_set(id, remote, &local_head)?;
    }
    Ok(TransferReport { dataset_id: *id, head: local_head, objects_transferred: transferred, head_changed })
}

/// Fetches the repository's head of `id`, validates the complete chain with
/// the fetched objects staged in memory, and only then adopts it. `name`
/// registers the dataset locally (defaults to its `Seed` name).
pub fn pull_remote(ws: &Workspace, id: &DatasetId, repo_path: &Path, name: Option<&str>) -> Result<TransferReport> {
    let repo = Repo::open(repo_path, false)?;
    let remote_head = repo.read_ref(id)?.ok_or(SyncError::NoSuchRef(*id))?;
    let _lock = ws.lock(id)?;
    let local_head = ws.head(id)?;
    if local_head == Some(remote_head) {
        return Ok(TransferReport { dataset_id: *id, head: remote_head, objects_transferred: 0, head_changed: false });
    }
    let local_blocks: HashSet<ObjectHash> = match local_head {
        Some(_) => ws.chain(id)?.blocks().iter().map(|b| b.block_hash).collect(),
        None => HashSet::new(),
    };

    let fetch = |overlay: &mut Overlay<'_>, hash: ObjectHash| -> Result<Vec<u8>> {
        let bytes = match repo.store.get(&hash) {
            Ok(b) => b,
            Err(StoreError::ObjectNotFound(h)) => return Err(SyncError::ObjectMissingInRepo(h)),
            Err(StoreError::ObjectCorrupt { expected, actual }) => {
                return Err(SyncError::InvalidChain(format!("object {expected} hashes to {actual}")))
            }
            Err(e) => return Err(repo.unavailable(e)),
        };
        overlay.stage(hash, bytes.clone()).map_err(|e| SyncError::InvalidChain(e.to_string()))?;
        Ok(bytes)
    };

    let mut overlay = Overlay::new(ws.store());
    // Walk back from the remote head until reaching a block we already have.
    let mut new_blocks = Vec::new();
    let mut next = remote_head;
    let mut reached_local = false;
    loop {
        if local_blocks.contains(&next) {
            reached_local = true;
            break;
        }
        let bytes = fetch(&mut overlay, next)?;
        let block = MetadataBlock::decode(&bytes).map_err(|e| SyncError::InvalidChain(format!("block {next}: {e}")))?;
        let done = block.sequence_number == 0;
        next = block.prev_block_hash;
        new_blocks.push(block);
        if done {
            break;
        }
    }
    if let Some(local) = local_head {
        // Adopting must extend the local chain, not replace it.
        if !reached_local || next != local {
            return Err(SyncError::NonFastForward { remote: remote_head, local });
        }
    }
    let (_, slices, checkpoints) = referenced(&new_blocks);
    for h in slices {
        if !ws.store().contains(&h) {
            fetch(&mut overlay, h)?;
        }
    }
    for h in checkpoints {
        if !ws.store().contains(&h) {
            match fetch(&mut overlay, h) {
                Ok(_) | Err(SyncError::ObjectMissingInRepo(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let report = validate(&overlay, &remote_head, ValidateOptions::default());
    if let Some(f) = report.failure {
        return Err(SyncError::InvalidChain(f.to_string()));
    }
    let genesis = Chain::load(&overlay, &remote_head).map_err(|e| SyncError::InvalidChain(e.to_string()))?;
    if genesis.dataset_id() != Some(*id) {
        return Err(SyncError::InvalidChain(format!("ref {id} points at a different dataset")));
    }
    let seed_name = genesis.state().name.clone();

    let staged = overlay.into_staged();
    let mut transferred = 0;
    let mut hashes: BTreeSet<&ObjectHash> = BTreeSet::new();
    hashes.extend(staged.keys());
    for h in hashes {
        ws.store().put(&staged[h]).map_err(CoordinatorError::from)?;
        transferred += 1;
    }
    ws.set_head(id, &remote_head)?;
    let name = name.unwrap_or(&seed_name);
    match ws.register_name(name, *id) {
        Ok(()) | Err(CoordinatorError::NameTaken(_)) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(TransferReport { dataset_id: *id, head: remote_head, objects_transferred: transferred, head_changed: true })
}
