//! The dataset graph of one workspace: registry, heads, locks, and the
//! operations that grow, verify and explain datasets.
//!
//! Layout under the workspace root:
//!
//! ```text
//! .odf/config            format marker
//! objects/               shared content store
//! datasets/<id>/head     hex block hash + newline
//! datasets/<id>/source   optional local source path (root datasets)
//! datasets/<id>/lock     per-dataset writer lock
//! names                  `name<TAB>id` lines, sorted by name
//! ```

mod history;
mod ingest_round;
mod provenance;
mod pull;
mod replay;
mod transform;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub use history::project_to;
pub use ingest_round::IngestOutcome;
pub use provenance::{Lineage, ProvenanceNode};
pub use pull::{PullAction, PullReport};
pub use replay::{Divergence, ReproReport};

use crate::chain::{
    validate, Chain, ChainError, DatasetId, DatasetKind, MetadataBlock, MetadataEvent, PollingSource, TransformDef,
    ValidateOptions, ValidationReport,
};
use crate::dsl::QueryError;
use crate::engine::{EngineError, EngineVersion};
use crate::hash::ObjectHash;
use crate::ingest::IngestError;
use crate::schema::SchemaDef;
use crate::slices::{Record, SliceError};
use crate::store::{ObjectSource, ObjectStore, StoreError};
use crate::time::Timestamp;

const CONFIG: &str = "format = 1\n";

#[derive(Debug, thiserror::Error)]
pub enum CoordinatorError {
    #[error("no workspace at or above {0}")]
    NotAWorkspace(PathBuf),
    #[error("a workspace already exists at {0}")]
    AlreadyInitialized(PathBuf),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("invalid dataset name {0:?}")]
    InvalidName(String),
    #[error("name {0:?} is registered to a different dataset")]
    NameTaken(String),
    #[error("{name} is a {actual} dataset")]
    WrongKind { name: String, actual: &'static str },
    #[error("dependency cycle through {0}")]
    CycleDetected(String),
    #[error("input {0} is not present in this workspace")]
    MissingInput(DatasetId),
    #[error("inputs do not match the query: {0}")]
    InputMismatch(String),
    #[error("offset {offset} not found in {dataset}")]
    OffsetNotFound { dataset: String, offset: u64 },
    #[error("engine {0} is not available in this build")]
    EngineVersionUnavailable(EngineVersion),
    #[error("no source path known for {0}")]
    NoSource(String),
    #[error("records of {dataset} cannot be read as {schema}: {message}")]
    SchemaIncompatible { dataset: String, schema: SchemaDef, message: String },
    #[error("cannot rebuild {dataset}: {message}")]
    RestoreFailed { dataset: String, message: String },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CoordinatorError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CoordinatorError::Io { path: path.into(), source }
    }

    /// Whether the failure is environmental rather than a property of the data.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            CoordinatorError::Io { .. }
                | CoordinatorError::Store(StoreError::Io { .. })
                | CoordinatorError::Chain(ChainError::Store(StoreError::Io { .. }))
                | CoordinatorError::Ingest(IngestError::Io { .. })
        )
    }
}

pub type Result<T, E = CoordinatorError> = std::result::Result<T, E>;

/// What `define_*` did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefineOutcome {
    Created,
    Updated,
    Unchanged,
}

/// A fixed view of a dataset: the blocks with `system_time <= as_of` and the
/// records they reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StableRef {
    pub dataset_id: DatasetId,
    pub as_of: Timestamp,
    /// Hash of the last included block, if any.
    pub head: Option<ObjectHash>,
    pub block_count: u64,
    /// One past the last included record offset.
    pub offset_bound: u64,
}

/// Exclusive writer lock on one dataset, released on drop.
pub struct DatasetLock {
    _file: fs::File,
}

pub struct Workspace {
    root: PathBuf,
    store: ObjectStore,
}

impl Workspace {
    pub fn init(root: impl AsRef<Path>) -> Result<Workspace> {
        let root = root.as_ref().to_path_buf();
        let config = root.join(".odf").join("config");
        if config.exists() {
            return Err(CoordinatorError::AlreadyInitialized(root));
        }
        let dot = root.join(".odf");
        fs::create_dir_all(&dot).map_err(|e| CoordinatorError::io(&dot, e))?;
        fs::create_dir_all(root.join("datasets")).map_err(|e| CoordinatorError::io(root.join("datasets"), e))?;
        write_atomic(&root.join("names"), b"")?;
        write_atomic(&config, CONFIG.as_bytes())?;
        Workspace::open(root)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Workspace> {
        let root = root.as_ref().to_path_buf();
        if !root.join(".odf").join("config").is_file() {
            return Err(CoordinatorError::NotAWorkspace(root));
        }
        let store = ObjectStore::open(&root)?;
        Ok(Workspace { root, store })
    }

    /// Opens the nearest workspace at or above `start`.
    pub fn discover(start: impl AsRef<Path>) -> Result<Workspace> {
        let start = start.as_ref();
        let mut dir = Some(start);
        while let Some(d) = dir {
            if d.join(".odf").join("config").is_file() {
                return Workspace::open(d);
            }
            dir = d.parent();
        }
        Err(CoordinatorError::NotAWorkspace(start.to_path_buf()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    fn dataset_dir(&self, id: &DatasetId) -> PathBuf {
        self.root.join("datasets").join(id.to_string())
    }

    pub fn lock(&self, id: &DatasetId) -> Result<DatasetLock> {
        let dir = self.dataset_dir(id);
        fs::create_dir_all(&dir).map_err(|e| CoordinatorError::io(&dir, e))?;
        let path = dir.join("lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| CoordinatorError::io(&path, e))?;
        file.lock().map_err(|e| CoordinatorError::io(&path, e))?;
        Ok(DatasetLock { _file: file })
    }

    fn lock_registry(&self) -> Result<fs::File> {
        let path = self.root.join(".odf").join("lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| CoordinatorError::io(&path, e))?;
        file.lock().map_err(|e| CoordinatorError::io(&path, e))?;
        Ok(file)
    }

    pub fn names(&self) -> Result<BTreeMap<String, DatasetId>> {
        let path = self.root.join("names");
        let text = fs::read_to_string(&path).map_err(|e| CoordinatorError::io(&path, e))?;
        let mut out = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let parsed = line.split_once('\t').and_then(|(n, id)| Some((n.to_string(), DatasetId::parse(id)?)));
            let (name, id) = parsed.ok_or_else(|| {
                CoordinatorError::io(&path, io::Error::new(io::ErrorKind::InvalidData, format!("bad line {line:?}")))
            })?;
            out.insert(name, id);
        }
        Ok(out)
    }

    /// Registers `name` for `id`; a no-op if already registered to it.
    pub fn register_name(&self, name: &str, id: DatasetId) -> Result<()> {
        check_name(name)?;
        let _guard = self.lock_registry()?;
        let mut names = self.names()?;
        match names.get(name) {
            Some(existing) if *existing == id => return Ok(()),
            Some(_) => return Err(CoordinatorError::NameTaken(name.to_string())),
            None => {}
        }
        names.insert(name.to_string(), id);
        let text: String = names.iter().map(|(n, id)| format!("{n}\t{id}\n")).collect();
        write_atomic(&self.root.join("names"), text.as_bytes())
    }

    /// The registered name of `id`, if any.
    pub fn name_of(&self, id: &DatasetId) -> Result<Option<String>> {
        Ok(self.names()?.into_iter().find(|(_, v)| v == id).map(|(n, _)| n))
    }

    /// A human label: the registered name, else the id.
    pub fn label(&self, id: &DatasetId) -> String {
        self.name_of(id).ok().flatten().unwrap_or_else(|| id.to_string())
    }

    /// Resolves a registered name or a hex dataset id present locally.
    pub fn resolve(&self, name_or_id: &str) -> Result<DatasetId> {
        if let Some(id) = self.names()?.get(name_or_id) {
            return Ok(*id);
        }
        match DatasetId::parse(name_or_id) {
            Some(id) if self.head(&id)?.is_some() => Ok(id),
            _ => Err(CoordinatorError::UnknownDataset(name_or_id.to_string())),
        }
    }

    pub fn head(&self, id: &DatasetId) -> Result<Option<ObjectHash>> {
        let path = self.dataset_dir(id).join("head");
        match fs::read_to_string(&path) {
            Ok(text) => ObjectHash::parse(text.trim_end_matches('\n')).map(Some).map_err(|e| {
                CoordinatorError::io(&path, io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CoordinatorError::io(path, e)),
        }
    }

    /// Points `id` at `head`. Callers hold the dataset lock and have stored
    /// every object the new head references.
    pub fn set_head(&self, id: &DatasetId, head: &ObjectHash) -> Result<()> {
        let dir = self.dataset_dir(id);
        fs::create_dir_all(&dir).map_err(|e| CoordinatorError::io(&dir, e))?;
        write_atomic(&dir.join("head"), format!("{head}\n").as_bytes())
    }

    /// Every dataset with a head in this workspace.
    pub fn dataset_ids(&self) -> Result<Vec<DatasetId>> {
        let dir = self.root.join("datasets");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| CoordinatorError::io(&dir, e))? {
            let entry = entry.map_err(|e| CoordinatorError::io(&dir, e))?;
            if let Some(id) = DatasetId::parse(&entry.file_name().to_string_lossy()) {
                if self.head(&id)?.is_some() {
                    out.push(id);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn chain(&self, id: &DatasetId) -> Result<Chain> {
        let head = self.head(id)?.ok_or_else(|| CoordinatorError::UnknownDataset(id.to_string()))?;
        Ok(Chain::load(&self.store, &head)?)
    }

    pub fn source_path(&self, id: &DatasetId) -> Result<Option<PathBuf>> {
        let path = self.dataset_dir(id).join("source");
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(PathBuf::from(text.trim_end_matches('\n')))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CoordinatorError::io(path, e)),
        }
    }

    pub fn set_source_path(&self, id: &DatasetId, source: &Path) -> Result<()> {
        let dir = self.dataset_dir(id);
        fs::create_dir_all(&dir).map_err(|e| CoordinatorError::io(&dir, e))?;
        write_atomic(&dir.join("source"), format!("{}\n", source.display()).as_bytes())
    }

    /// Creates a root dataset, or appends a `SetPollingSource` if the
    /// registered one's source definition changed.
    pub fn define_root(
        &self,
        name: &str,
        source: PollingSource,
        system_time: Timestamp,
    ) -> Result<(DatasetId, DefineOutcome)> {
        source.check().map_err(|reason| ChainError::IllegalEventForKind { event: "SetPollingSource", reason })?;
        if let Some(id) = self.names()?.get(name).copied() {
            let _lock = self.lock(&id)?;
            let mut chain = self.chain(&id)?;
            expect_kind(&chain, name, DatasetKind::Root)?;
            if chain.state().polling_source.as_ref() == Some(&source) {
                return Ok((id, DefineOutcome::Unchanged));
            }
            let t = effective_time(&chain, system_time);
            let head = chain.append(&self.store, MetadataEvent::SetPollingSource(source), t)?.block_hash;
            self.set_head(&id, &head)?;
            return Ok((id, DefineOutcome::Updated));
        }
        check_name(name)?;
        let mut chain = Chain::new();
        let seed = MetadataEvent::Seed { dataset_kind: DatasetKind::Root, dataset_name: name.to_string() };
        let id = DatasetId(chain.prepare(seed.clone(), system_time)?.block_hash);
        let _lock = self.lock(&id)?;
        if self.head(&id)?.is_some() {
            return Err(CoordinatorError::NameTaken(name.to_string()));
        }
        chain.append(&self.store, seed, system_time)?;
        let head = chain.append(&self.store, MetadataEvent::SetPollingSource(source), system_time)?.block_hash;
        self.set_head(&id, &head)?;
        self.register_name(name, id)?;
        Ok((id, DefineOutcome::Created))
    }

    /// Creates a derivative dataset, or appends a `SetTransform` if the
    /// registered one's definition changed. The query is compiled against
    /// the inputs' current schemas before anything is written.
    pub fn define_derivative(
        &self,
        name: &str,
        inputs: Vec<DatasetId>,
        query: &str,
        engine: EngineVersion,
        system_time: Timestamp,
    ) -> Result<(DatasetId, DefineOutcome)> {
        let transform = TransformDef { inputs, query: query.to_string(), engine };
        let mut hist = history::History::new(self);
        hist.compile_current(&transform)?;
        let existing = self.names()?.get(name).copied();
        if let Some(id) = existing {
            let _lock = self.lock(&id)?;
            let mut chain = self.chain(&id)?;
            expect_kind(&chain, name, DatasetKind::Derivative)?;
            if chain.state().transform.as_ref() == Some(&transform) {
                return Ok((id, DefineOutcome::Unchanged));
            }
            for input in &transform.inputs {
                if input == &id || self.upstream(input)?.contains(&id) {
                    return Err(CoordinatorError::CycleDetected(name.to_string()));
                }
            }
            let t = effective_time(&chain, system_time);
            let head = chain.append(&self.store, MetadataEvent::SetTransform(transform), t)?.block_hash;
            self.set_head(&id, &head)?;
            return Ok((id, DefineOutcome::Updated));
        }
        check_name(name)?;
        let mut chain = Chain::new();
        let seed = MetadataEvent::Seed { dataset_kind: DatasetKind::Derivative, dataset_name: name.to_string() };
        let id = DatasetId(chain.prepare(seed.clone(), system_time)?.block_hash);
        let _lock = self.lock(&id)?;
        if self.head(&id)?.is_some() {
            return Err(CoordinatorError::NameTaken(name.to_string()));
        }
        chain.append(&self.store, seed, system_time)?;
        let head = chain.append(&self.store, MetadataEvent::SetTransform(transform), system_time)?.block_hash;
        self.set_head(&id, &head)?;
        self.register_name(name, id)?;
        Ok((id, DefineOutcome::Created))
    }

    /// Every dataset `id` transitively reads from (excluding itself).
    pub fn upstream(&self, id: &DatasetId) -> Result<Vec<DatasetId>> {
        let order = self.topological(id)?;
        Ok(order.into_iter().filter(|d| d != id).collect())
    }

    /// `id` and its transitive inputs, inputs first.
    pub fn topological(&self, id: &DatasetId) -> Result<Vec<DatasetId>> {
        fn visit(
            ws: &Workspace,
            id: DatasetId,
            on_path: &mut Vec<DatasetId>,
            done: &mut Vec<DatasetId>,
        ) -> Result<()> {
            if done.contains(&id) {
                return Ok(());
            }
            if on_path.contains(&id) {
                return Err(CoordinatorError::CycleDetected(ws.label(&id)));
            }
            if ws.head(&id)?.is_none() {
                return Err(CoordinatorError::MissingInput(id));
            }
            on_path.push(id);
            let chain = ws.chain(&id)?;
            if let Some(t) = &chain.state().transform {
                for input in &t.inputs {
                    visit(ws, *input, on_path, done)?;
                }
            }
            on_path.pop();
            done.push(id);
            Ok(())
        }
        let mut done = Vec::new();
        visit(self, *id, &mut Vec::new(), &mut done)?;
        Ok(done)
    }

    /// Advances a root dataset's watermark by hand.
    pub fn set_watermark(&self, id: &DatasetId, t: Timestamp, system_time: Timestamp) -> Result<MetadataBlock> {
        let _lock = self.lock(id)?;
        let mut chain = self.chain(id)?;
        let st = effective_time(&chain, system_time);
        let block = chain.append(&self.store, MetadataEvent::SetWatermark { new_watermark: t }, st)?.clone();
        self.set_head(id, &block.block_hash)?;
        Ok(block)
    }

    /// Integrity report for `id` and, if `recursive`, its transitive inputs
    /// (inputs first).
    pub fn verify_integrity(&self, id: &DatasetId, recursive: bool) -> Result<Vec<(DatasetId, ValidationReport)>> {
        let targets = if recursive { self.topological(id).unwrap_or_else(|_| vec![*id]) } else { vec![*id] };
        let mut out = Vec::new();
        for t in targets {
            let head = self.head(&t)?.ok_or_else(|| CoordinatorError::UnknownDataset(t.to_string()))?;
            out.push((t, validate(&self.store, &head, ValidateOptions::default())));
        }
        Ok(out)
    }

    /// Pins the blocks of `id` with `system_time <= as_of`.
    pub fn resolve_as_of(&self, id: &DatasetId, as_of: Timestamp) -> Result<StableRef> {
        let chain = self.chain(id)?;
        let prefix = chain.prefix(chain.blocks_as_of(as_of).len());
        Ok(StableRef {
            dataset_id: *id,
            as_of,
            head: prefix.blocks().last().map(|b| b.block_hash),
            block_count: prefix.len() as u64,
            offset_bound: prefix.state().next_offset,
        })
    }

    /// The slice bytes behind a stable reference, concatenated in offset
    /// order. Missing derivative slices are recomputed first.
    pub fn read_ref_bytes(&self, r: &StableRef) -> Result<Vec<u8>> {
        self.materialize(&r.dataset_id)?;
        let chain = self.chain(&r.dataset_id)?;
        let mut out = Vec::new();
        for b in &chain.blocks()[..r.block_count as usize] {
            if let Some(slice) = b.event.output_slice() {
                out.extend(self.store.get(&slice.slice_hash)?);
            }
        }
        Ok(out)
    }

    /// Records `[0, offset_bound)` of a stable reference in the dataset's
    /// current schema.
    pub fn read_ref(&self, r: &StableRef) -> Result<(SchemaDef, Vec<Record>)> {
        self.materialize(&r.dataset_id)?;
        let mut hist = history::History::new(self);
        let schema = hist.current_schema(&r.dataset_id)?;
        let records = hist.read_records(&r.dataset_id, 0, r.offset_bound, &schema)?;
        Ok((schema, records))
    }

    /// All records of `id` in its current schema.
    pub fn records(&self, id: &DatasetId) -> Result<(SchemaDef, Vec<Record>)> {
        let r = self.resolve_as_of(id, Timestamp::MAX)?;
        self.read_ref(&r)
    }

    /// The current schema and event-time column of `id`.
    pub fn current_schema(&self, id: &DatasetId) -> Result<SchemaDef> {
        history::History::new(self).current_schema(id)
    }
}

fn expect_kind(chain: &Chain, name: &str, kind: DatasetKind) -> Result<()> {
    match chain.state().kind {
        Some(k) if k == kind => Ok(()),
        Some(k) => Err(CoordinatorError::WrongKind { name: name.to_string(), actual: k.name() }),
        None => Err(ChainError::EmptyChain.into()),
    }
}

/// Block times never run backwards, even if the caller's clock does.
fn effective_time(chain: &Chain, requested: Timestamp) -> Timestamp {
    chain.state().head.map_or(requested, |(_, _, t)| requested.max(t))
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CoordinatorError::InvalidName(name.to_string()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("path has a parent");
    let tmp = dir.join(format!(".{}.tmp-{}", path.file_name().unwrap_or_default().to_string_lossy(), std::process::id()));
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CoordinatorError::io(path, e)
    })
}
