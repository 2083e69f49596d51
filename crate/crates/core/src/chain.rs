//! The append-only, hash-linked ledger of dataset lifecycle events.
//!
//! Each block is stored in the content store as the canonical encoding of
//! `{event, prev_block_hash, sequence_number, system_time}`; its name is the
//! block hash. A dataset's identity is the hash of its `Seed` block.

use std::fmt;

use crate::canonical::{canonicalize, decode, DecodeError, Fields, Value};
use crate::engine::EngineVersion;
use crate::hash::ObjectHash;
use crate::par::{self, Parallelism};
use crate::schema::{ColumnType, SchemaDef};
use crate::slices::{check_slice_bytes, SliceRef};
use crate::store::{ObjectSource, ObjectStore, StoreError};
use crate::time::Timestamp;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DatasetId(pub ObjectHash);

impl DatasetId {
    pub fn parse(text: &str) -> Option<Self> {
        ObjectHash::parse(text).ok().map(DatasetId)
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DatasetId({})", &self.0.to_hex()[..12])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Root,
    Derivative,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Root => "root",
            DatasetKind::Derivative => "derivative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "root" => Some(DatasetKind::Root),
            "derivative" => Some(DatasetKind::Derivative),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceFormat {
    Csv,
    Ndjson,
}

impl SourceFormat {
    pub fn name(self) -> &'static str {
        match self {
            SourceFormat::Csv => "csv",
            SourceFormat::Ndjson => "ndjson",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(SourceFormat::Csv),
            "ndjson" => Some(SourceFormat::Ndjson),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MergeStrategy {
    /// Append-only source; rows whose key was already ingested are dropped.
    Ledger { primary_key: Vec<String> },
    /// Full state dumps, historized into A/C/R events.
    Snapshot { primary_key: Vec<String> },
}

impl MergeStrategy {
    pub fn primary_key(&self) -> &[String] {
        match self {
            MergeStrategy::Ledger { primary_key } | MergeStrategy::Snapshot { primary_key } => primary_key,
        }
    }

    fn to_value(&self) -> Value {
        let (kind, pk) = match self {
            MergeStrategy::Ledger { primary_key } => ("ledger", primary_key),
            MergeStrategy::Snapshot { primary_key } => ("snapshot", primary_key),
        };
        Value::map([
            ("kind", Value::str(kind)),
            ("primary_key", Value::Array(pk.iter().map(Value::str).collect())),
        ])
    }

    fn from_fields(f: &Fields<'_>) -> Result<Self, DecodeError> {
        f.only(&["kind", "primary_key"])?;
        let primary_key = string_list(f, "primary_key")?;
        match f.str("kind")? {
            "ledger" => Ok(MergeStrategy::Ledger { primary_key }),
            "snapshot" => Ok(MergeStrategy::Snapshot { primary_key }),
            other => Err(f.err("kind", format!("unknown merge strategy {other:?}"))),
        }
    }
}

/// How a root dataset reads its external source.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PollingSource {
    pub format: SourceFormat,
    pub schema: SchemaDef,
    /// Required for ledger merges; snapshot rows take the ingestion time.
    pub event_time_column: Option<String>,
    pub merge: MergeStrategy,
    pub allowed_lateness_ms: u64,
}

impl PollingSource {
    /// Checks the source definition for internal consistency.
    pub fn check(&self) -> Result<(), String> {
        self.schema.validate().map_err(|e| e.to_string())?;
        let pk = self.merge.primary_key();
        if pk.is_empty() {
            return Err("merge.primary_key must not be empty".into());
        }
        for k in pk {
            if self.schema.index_of(k).is_none() {
                return Err(format!("merge.primary_key column {k:?} is not in the schema"));
            }
        }
        match (&self.merge, &self.event_time_column) {
            (MergeStrategy::Ledger { .. }, None) => {
                return Err("event_time_column is required for ledger merges".into())
            }
            (_, Some(col)) => match self.schema.column(col) {
                Some(c) if c.ty == ColumnType::Timestamp => {}
                Some(c) => return Err(format!("event_time_column {col:?} has type {}, not timestamp", c.ty)),
                None => return Err(format!("event_time_column {col:?} is not in the schema")),
            },
            _ => {}
        }
        if i64::try_from(self.allowed_lateness_ms).is_err() {
            return Err("allowed_lateness out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TransformDef {
    pub inputs: Vec<DatasetId>,
    pub query: String,
    pub engine: EngineVersion,
}

/// The part of an input dataset consumed by one transform step.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InputSlice {
    pub dataset_id: DatasetId,
    pub offset_start: u64,
    /// Exclusive; equal to `offset_start` when no new records were consumed.
    pub offset_end: u64,
    /// The input's watermark delivered with these records.
    pub watermark: Option<Timestamp>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MetadataEvent {
    Seed {
        dataset_kind: DatasetKind,
        dataset_name: String,
    },
    SetPollingSource(PollingSource),
    SetTransform(TransformDef),
    AddData {
        output_slice: Option<SliceRef>,
        output_watermark: Option<Timestamp>,
        source_fingerprint: ObjectHash,
    },
    ExecuteTransform {
        input_slices: Vec<InputSlice>,
        prior_checkpoint: Option<ObjectHash>,
        new_checkpoint: Option<ObjectHash>,
        output_slice: Option<SliceRef>,
        output_watermark: Option<Timestamp>,
        late_records_ignored: u64,
    },
    SetWatermark {
        new_watermark: Timestamp,
    },
}

impl MetadataEvent {
    pub fn kind_name(&self) -> &'static str {
        match self {
            MetadataEvent::Seed { .. } => "Seed",
            MetadataEvent::SetPollingSource(_) => "SetPollingSource",
            MetadataEvent::SetTransform(_) => "SetTransform",
            MetadataEvent::AddData { .. } => "AddData",
            MetadataEvent::ExecuteTransform { .. } => "ExecuteTransform",
            MetadataEvent::SetWatermark { .. } => "SetWatermark",
        }
    }

    pub fn output_slice(&self) -> Option<&SliceRef> {
        match self {
            MetadataEvent::AddData { output_slice, .. } | MetadataEvent::ExecuteTransform { output_slice, .. } => {
                output_slice.as_ref()
            }
            _ => None,
        }
    }

    /// The watermark this event asserts, if it carries one.
    pub fn watermark(&self) -> Option<Option<Timestamp>> {
        match self {
            MetadataEvent::AddData { output_watermark, .. }
            | MetadataEvent::ExecuteTransform { output_watermark, .. } => Some(*output_watermark),
            MetadataEvent::SetWatermark { new_watermark } => Some(Some(*new_watermark)),
            _ => None,
        }
    }

    pub fn to_value(&self) -> Value {
        let mut fields: Vec<(&str, Value)> = vec![("kind", Value::str(self.kind_name()))];
        match self {
            MetadataEvent::Seed { dataset_kind, dataset_name } => {
                fields.push(("dataset_kind", Value::str(dataset_kind.name())));
                fields.push(("dataset_name", Value::str(dataset_name)));
            }
            MetadataEvent::SetPollingSource(src) => {
                fields.push(("format", Value::str(src.format.name())));
                fields.push(("schema", src.schema.to_value()));
                fields.push((
                    "event_time_column",
                    src.event_time_column.as_ref().map_or(Value::Null, Value::str),
                ));
                fields.push(("merge", src.merge.to_value()));
                fields.push(("allowed_lateness_ms", Value::Int(src.allowed_lateness_ms as i64)));
            }
            MetadataEvent::SetTransform(t) => {
                fields.push(("inputs", Value::Array(t.inputs.iter().map(|i| Value::hash(&i.0)).collect())));
                fields.push(("query", Value::str(&t.query)));
                fields.push(("engine", t.engine.to_value()));
            }
            MetadataEvent::AddData { output_slice, output_watermark, source_fingerprint } => {
                fields.push(("output_slice", output_slice.as_ref().map_or(Value::Null, SliceRef::to_value)));
                fields.push(("output_watermark", Value::opt_timestamp(*output_watermark)));
                fields.push(("source_fingerprint", Value::hash(source_fingerprint)));
            }
            MetadataEvent::ExecuteTransform {
                input_slices,
                prior_checkpoint,
                new_checkpoint,
                output_slice,
                output_watermark,
                late_records_ignored,
            } => {
                fields.push((
                    "input_slices",
                    Value::Array(
                        input_slices
                            .iter()
                            .map(|s| {
                                Value::map([
                                    ("dataset_id", Value::hash(&s.dataset_id.0)),
                                    ("offset_start", Value::Int(s.offset_start as i64)),
                                    ("offset_end", Value::Int(s.offset_end as i64)),
                                    ("watermark", Value::opt_timestamp(s.watermark)),
                                ])
                            })
                            .collect(),
                    ),
                ));
                fields.push(("prior_checkpoint", Value::opt_hash(prior_checkpoint)));
                fields.push(("new_checkpoint", Value::opt_hash(new_checkpoint)));
                fields.push(("output_slice", output_slice.as_ref().map_or(Value::Null, SliceRef::to_value)));
                fields.push(("output_watermark", Value::opt_timestamp(*output_watermark)));
                fields.push(("late_records_ignored", Value::Int(*late_records_ignored as i64)));
            }
            MetadataEvent::SetWatermark { new_watermark } => {
                fields.push(("new_watermark", Value::Timestamp(*new_watermark)));
            }
        }
        Value::map(fields)
    }

    pub fn from_fields(f: &Fields<'_>) -> Result<Self, DecodeError> {
        let opt_slice = |key: &str| -> Result<Option<SliceRef>, DecodeError> {
            match f.get(key)? {
                Value::Null => Ok(None),
                _ => SliceRef::from_fields(&f.nested(key)?).map(Some),
            }
        };
        Ok(match f.str("kind")? {
            "Seed" => {
                f.only(&["kind", "dataset_kind", "dataset_name"])?;
                let k = f.str("dataset_kind")?;
                MetadataEvent::Seed {
                    dataset_kind: DatasetKind::parse(k)
                        .ok_or_else(|| f.err("dataset_kind", format!("unknown kind {k:?}")))?,
                    dataset_name: f.str("dataset_name")?.to_string(),
                }
            }
            "SetPollingSource" => {
                f.only(&["kind", "format", "schema", "event_time_column", "merge", "allowed_lateness_ms"])?;
                let fmt = f.str("format")?;
                MetadataEvent::SetPollingSource(PollingSource {
                    format: SourceFormat::parse(fmt)
                        .ok_or_else(|| f.err("format", format!("unknown format {fmt:?}")))?,
                    schema: SchemaDef::from_value(&f.path_of("schema"), f.get("schema")?)?,
                    event_time_column: f.opt_str("event_time_column")?.map(str::to_string),
                    merge: MergeStrategy::from_fields(&f.nested("merge")?)?,
                    allowed_lateness_ms: f.u64("allowed_lateness_ms")?,
                })
            }
            "SetTransform" => {
                f.only(&["kind", "inputs", "query", "engine"])?;
                let inputs = f
                    .array("inputs")?
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => DatasetId::parse(s).ok_or_else(|| f.err("inputs", "bad dataset id")),
                        _ => Err(f.err("inputs", "expected dataset id strings")),
                    })
                    .collect::<Result<_, _>>()?;
                MetadataEvent::SetTransform(TransformDef {
                    inputs,
                    query: f.str("query")?.to_string(),
                    engine: EngineVersion::from_fields(&f.nested("engine")?)?,
                })
            }
            "AddData" => {
                f.only(&["kind", "output_slice", "output_watermark", "source_fingerprint"])?;
                MetadataEvent::AddData {
                    output_slice: opt_slice("output_slice")?,
                    output_watermark: f.opt_timestamp("output_watermark")?,
                    source_fingerprint: f.hash("source_fingerprint")?,
                }
            }
            "ExecuteTransform" => {
                f.only(&[
                    "kind",
                    "input_slices",
                    "prior_checkpoint",
                    "new_checkpoint",
                    "output_slice",
                    "output_watermark",
                    "late_records_ignored",
                ])?;
                let mut input_slices = Vec::new();
                for (i, item) in f.array("input_slices")?.iter().enumerate() {
                    let s = Fields::new(format!("{}[{i}]", f.path_of("input_slices")), item)?;
                    s.only(&["dataset_id", "offset_start", "offset_end", "watermark"])?;
                    let slice = InputSlice {
                        dataset_id: DatasetId(s.hash("dataset_id")?),
                        offset_start: s.u64("offset_start")?,
                        offset_end: s.u64("offset_end")?,
                        watermark: s.opt_timestamp("watermark")?,
                    };
                    if slice.offset_end < slice.offset_start {
                        return Err(s.err("offset_end", "precedes offset_start"));
                    }
                    input_slices.push(slice);
                }
                MetadataEvent::ExecuteTransform {
                    input_slices,
                    prior_checkpoint: f.opt_hash("prior_checkpoint")?,
                    new_checkpoint: f.opt_hash("new_checkpoint")?,
                    output_slice: opt_slice("output_slice")?,
                    output_watermark: f.opt_timestamp("output_watermark")?,
                    late_records_ignored: f.u64("late_records_ignored")?,
                }
            }
            "SetWatermark" => {
                f.only(&["kind", "new_watermark"])?;
                MetadataEvent::SetWatermark { new_watermark: f.timestamp("new_watermark")? }
            }
            other => return Err(f.err("kind", format!("unknown event kind {other:?}"))),
        })
    }
}

fn string_list(f: &Fields<'_>, key: &str) -> Result<Vec<String>, DecodeError> {
    f.array(key)?
        .iter()
        .map(|v| match v {
            Value::String(s) => Ok(s.clone()),
            _ => Err(f.err(key, "expected strings")),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataBlock {
    pub prev_block_hash: ObjectHash,
    pub sequence_number: u64,
    pub system_time: Timestamp,
    pub event: MetadataEvent,
    /// Hash of the canonical encoding of the other four fields.
    pub block_hash: ObjectHash,
}

impl MetadataBlock {
    pub fn new(prev_block_hash: ObjectHash, sequence_number: u64, system_time: Timestamp, event: MetadataEvent) -> Self {
        let mut block = MetadataBlock { prev_block_hash, sequence_number, system_time, event, block_hash: ObjectHash::ZERO };
        block.block_hash = ObjectHash::of(&block.encode());
        block
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("prev_block_hash", Value::hash(&self.prev_block_hash)),
            ("sequence_number", Value::Int(self.sequence_number as i64)),
            ("system_time", Value::Timestamp(self.system_time)),
            ("event", self.event.to_value()),
        ])
    }

    /// The stored bytes.
    pub fn encode(&self) -> Vec<u8> {
        canonicalize(&self.to_value()).expect("blocks hold no floats")
    }

    /// Decodes stored bytes; the block hash is recomputed from them.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let v = decode(bytes)?;
        let f = Fields::new("block", &v)?;
        f.only(&["prev_block_hash", "sequence_number", "system_time", "event"])?;
        let block = MetadataBlock::new(
            f.hash("prev_block_hash")?,
            f.u64("sequence_number")?,
            f.timestamp("system_time")?,
            MetadataEvent::from_fields(&f.nested("event")?)?,
        );
        if block.encode() != bytes {
            return Err(DecodeError::Syntax("block bytes are not in canonical form".into()));
        }
        Ok(block)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("system time {new} precedes head system time {head}")]
    SystemTimeRegression { head: Timestamp, new: Timestamp },
    #[error("{event} is not allowed here: {reason}")]
    IllegalEventForKind { event: &'static str, reason: String },
    #[error("watermark regression from {current:?} to {new:?}")]
    WatermarkRegression { current: Option<Timestamp>, new: Option<Timestamp> },
    #[error("output slice starts at offset {found}, expected {expected}")]
    SliceDiscontinuity { expected: u64, found: u64 },
    #[error("chain is empty")]
    EmptyChain,
    #[error("block {0} not found in chain")]
    BlockNotFound(ObjectHash),
    #[error("block at sequence {sequence}: {message}")]
    Malformed { sequence: u64, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// State accumulated by replaying a chain's events.
#[derive(Clone, Debug, Default)]
pub struct ChainState {
    pub kind: Option<DatasetKind>,
    pub name: String,
    pub polling_source: Option<PollingSource>,
    pub transform: Option<TransformDef>,
    pub watermark: Option<Timestamp>,
    /// One past the last record offset.
    pub next_offset: u64,
    pub head: Option<(ObjectHash, u64, Timestamp)>,
}

impl ChainState {
    /// Checks `block` against the state and advances it.
    fn apply(&mut self, block: &MetadataBlock) -> Result<(), ChainError> {
        let (expected_prev, expected_seq) = match self.head {
            None => (ObjectHash::ZERO, 0),
            Some((h, seq, _)) => (h, seq + 1),
        };
        if block.prev_block_hash != expected_prev || block.sequence_number != expected_seq {
            return Err(ChainError::Malformed {
                sequence: block.sequence_number,
                message: format!("expected sequence {expected_seq} linked to {expected_prev}"),
            });
        }
        if let Some((_, _, head_time)) = self.head {
            if block.system_time < head_time {
                return Err(ChainError::SystemTimeRegression { head: head_time, new: block.system_time });
            }
        }
        self.check_placement(&block.event)?;
        if let Some(new) = block.event.watermark() {
            if self.watermark.is_some() && (new.is_none() || new < self.watermark) {
                return Err(ChainError::WatermarkRegression { current: self.watermark, new });
            }
        }
        if let Some(slice) = block.event.output_slice() {
            if slice.offset_start != self.next_offset {
                return Err(ChainError::SliceDiscontinuity { expected: self.next_offset, found: slice.offset_start });
            }
        }

        match &block.event {
            MetadataEvent::Seed { dataset_kind, dataset_name } => {
                self.kind = Some(*dataset_kind);
                self.name = dataset_name.clone();
            }
            MetadataEvent::SetPollingSource(src) => self.polling_source = Some(src.clone()),
            MetadataEvent::SetTransform(t) => self.transform = Some(t.clone()),
            _ => {}
        }
        if let Some(w) = block.event.watermark() {
            self.watermark = w;
        }
        if let Some(slice) = block.event.output_slice() {
            self.next_offset = slice.offset_end;
        }
        self.head = Some((block.block_hash, block.sequence_number, block.system_time));
        Ok(())
    }

    fn check_placement(&self, event: &MetadataEvent) -> Result<(), ChainError> {
        let illegal = |reason: &str| ChainError::IllegalEventForKind { event: event.kind_name(), reason: reason.into() };
        let kind = match (self.kind, event) {
            (None, MetadataEvent::Seed { .. }) => return Ok(()),
            (None, _) => return Err(illegal("the first block must be a Seed")),
            (Some(_), MetadataEvent::Seed { .. }) => return Err(illegal("Seed may only appear once")),
            (Some(k), _) => k,
        };
        match (kind, event) {
            (DatasetKind::Root, MetadataEvent::SetPollingSource(src)) => src.check().map_err(|e| illegal(&e)),
            (DatasetKind::Root, MetadataEvent::AddData { .. }) if self.polling_source.is_none() => {
                Err(illegal("no polling source is set"))
            }
            (DatasetKind::Root, MetadataEvent::AddData { .. } | MetadataEvent::SetWatermark { .. }) => Ok(()),
            (DatasetKind::Derivative, MetadataEvent::SetTransform(t)) if t.inputs.is_empty() => {
                Err(illegal("a transform needs at least one input"))
            }
            (DatasetKind::Derivative, MetadataEvent::SetTransform(_)) => Ok(()),
            (DatasetKind::Derivative, MetadataEvent::ExecuteTransform { input_slices, .. }) => {
                let Some(t) = &self.transform else {
                    return Err(illegal("no transform is set"));
                };
                let ids: Vec<DatasetId> = input_slices.iter().map(|s| s.dataset_id).collect();
                if ids != t.inputs {
                    return Err(illegal("input slices do not match the transform's inputs"));
                }
                Ok(())
            }
            (DatasetKind::Root, _) => Err(illegal("not allowed on root datasets")),
            (DatasetKind::Derivative, _) => Err(illegal("not allowed on derivative datasets")),
        }
    }
}

/// An in-memory view of a chain, oldest block first.
#[derive(Clone, Debug, Default)]
pub struct Chain {
    blocks: Vec<MetadataBlock>,
    state: ChainState,
}

impl Chain {
    pub fn new() -> Self {
        Chain::default()
    }

    /// Loads the chain ending at `head`, checking every hash and rule.
    pub fn load(source: &dyn ObjectSource, head: &ObjectHash) -> Result<Chain, ChainError> {
        let mut rev = Vec::new();
        let mut next = *head;
        loop {
            let bytes = source.get(&next)?;
            let block = MetadataBlock::decode(&bytes).map_err(|e| ChainError::Malformed {
                sequence: rev.last().map_or(0, |b: &MetadataBlock| b.sequence_number.saturating_sub(1)),
                message: e.to_string(),
            })?;
            let done = block.sequence_number == 0;
            next = block.prev_block_hash;
            rev.push(block);
            if done {
                break;
            }
        }
        let mut chain = Chain::new();
        for block in rev.into_iter().rev() {
            chain.state.apply(&block)?;
            chain.blocks.push(block);
        }
        Ok(chain)
    }

    pub fn blocks(&self) -> &[MetadataBlock] {
        &self.blocks
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dataset_id(&self) -> Option<DatasetId> {
        self.blocks.first().map(|b| DatasetId(b.block_hash))
    }

    pub fn head(&self) -> Result<&MetadataBlock, ChainError> {
        self.blocks.last().ok_or(ChainError::EmptyChain)
    }

    pub fn block_by_hash(&self, hash: &ObjectHash) -> Result<&MetadataBlock, ChainError> {
        self.blocks.iter().find(|b| b.block_hash == *hash).ok_or(ChainError::BlockNotFound(*hash))
    }

    /// Builds the next block for `event` without storing it.
    pub fn prepare(&self, event: MetadataEvent, system_time: Timestamp) -> Result<MetadataBlock, ChainError> {
        let (prev, seq) = match self.blocks.last() {
            None => (ObjectHash::ZERO, 0),
            Some(b) => (b.block_hash, b.sequence_number + 1),
        };
        let block = MetadataBlock::new(prev, seq, system_time, event);
        self.state.clone().apply(&block)?;
        Ok(block)
    }

    /// Appends a block for `event`, persisting it in `store`.
    pub fn append(
        &mut self,
        store: &ObjectStore,
        event: MetadataEvent,
        system_time: Timestamp,
    ) -> Result<&MetadataBlock, ChainError> {
        let block = self.prepare(event, system_time)?;
        store.put(&block.encode())?;
        self.state.apply(&block).expect("checked in prepare");
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Blocks with `system_time <= as_of`, in sequence order.
    pub fn blocks_as_of(&self, as_of: Timestamp) -> &[MetadataBlock] {
        let n = self.blocks.partition_point(|b| b.system_time <= as_of);
        &self.blocks[..n]
    }

    /// The chain truncated to its first `len` blocks.
    pub fn prefix(&self, len: usize) -> Chain {
        let mut chain = Chain::new();
        for b in &self.blocks[..len.min(self.blocks.len())] {
            chain.state.apply(b).expect("prefix of a valid chain");
            chain.blocks.push(b.clone());
        }
        chain
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// The block object is missing, corrupt, or undecodable.
    BlockUnreadable(String),
    /// Link, sequence, system-time, placement, or watermark rule broken.
    RuleViolation(String),
    SliceMismatch { slice_hash: ObjectHash, reason: String },
    CheckpointMismatch { checkpoint: ObjectHash, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationFailure {
    pub sequence_number: u64,
    pub block_hash: Option<ObjectHash>,
    pub kind: FailureKind,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block seq {}", self.sequence_number)?;
        if let Some(h) = self.block_hash {
            write!(f, " ({h})")?;
        }
        match &self.kind {
            FailureKind::BlockUnreadable(r) => write!(f, ": hash mismatch or unreadable block: {r}"),
            FailureKind::RuleViolation(r) => write!(f, ": {r}"),
            FailureKind::SliceMismatch { slice_hash, reason } => write!(f, ": slice hash mismatch {slice_hash}: {reason}"),
            FailureKind::CheckpointMismatch { checkpoint, reason } => {
                write!(f, ": checkpoint hash mismatch {checkpoint}: {reason}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub blocks_checked: u64,
    pub objects_checked: u64,
    /// The failure with the lowest sequence number, if any.
    pub failure: Option<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidateOptions {
    /// Checkpoints may be absent (they are recomputable); present ones must
    /// still hash correctly.
    pub allow_missing_checkpoints: bool,
    pub parallelism: Parallelism,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { allow_missing_checkpoints: true, parallelism: Parallelism::default() }
    }
}

/// Recomputes every block hash from `head` back to genesis, replays the chain
/// rules, and rehashes every referenced slice and checkpoint.
pub fn validate(source: &dyn ObjectSource, head: &ObjectHash, opts: ValidateOptions) -> ValidationReport {
    let mut failures = Vec::new();
    let mut rev: Vec<MetadataBlock> = Vec::new();
    let mut next = *head;
    let mut expected_seq: Option<u64> = None;
    loop {
        let seq = expected_seq.unwrap_or(0);
        let read = source
            .get(&next)
            .map_err(|e| e.to_string())
            .and_then(|bytes| MetadataBlock::decode(&bytes).map_err(|e| e.to_string()));
        let block = match read {
            Ok(b) => b,
            Err(reason) => {
                failures.push(ValidationFailure {
                    sequence_number: seq,
                    block_hash: Some(next),
                    kind: FailureKind::BlockUnreadable(reason),
                });
                break;
            }
        };
        if let Some(s) = expected_seq {
            if block.sequence_number != s {
                failures.push(ValidationFailure {
                    sequence_number: s,
                    block_hash: Some(block.block_hash),
                    kind: FailureKind::RuleViolation(format!("found sequence {} in its place", block.sequence_number)),
                });
                break;
            }
        }
        let done = block.sequence_number == 0;
        expected_seq = block.sequence_number.checked_sub(1);
        next = block.prev_block_hash;
        rev.push(block);
        if done {
            break;
        }
    }
    let blocks: Vec<MetadataBlock> = rev.into_iter().rev().collect();
    let blocks_checked = blocks.len() as u64;

    // Rule replay only makes sense from genesis.
    if failures.is_empty() {
        let mut state = ChainState::default();
        for b in &blocks {
            if let Err(e) = state.apply(b) {
                failures.push(ValidationFailure {
                    sequence_number: b.sequence_number,
                    block_hash: Some(b.block_hash),
                    kind: FailureKind::RuleViolation(e.to_string()),
                });
                break;
            }
        }
    }

    enum Obj<'a> {
        Slice(&'a MetadataBlock, &'a SliceRef),
        Checkpoint(&'a MetadataBlock, ObjectHash),
    }
    let mut objects = Vec::new();
    for b in &blocks {
        if let Some(slice) = b.event.output_slice() {
            objects.push(Obj::Slice(b, slice));
        }
        if let MetadataEvent::ExecuteTransform { new_checkpoint: Some(cp), .. } = &b.event {
            objects.push(Obj::Checkpoint(b, *cp));
        }
    }
    let objects_checked = objects.len() as u64;
    let object_failures = par::map(opts.parallelism, &objects, |obj| match obj {
        Obj::Slice(b, slice) => {
            let reason = match source.get(&slice.slice_hash) {
                Ok(bytes) => check_slice_bytes(&bytes, slice).err(),
                Err(e) => Some(e.to_string()),
            };
            reason.map(|reason| ValidationFailure {
                sequence_number: b.sequence_number,
                block_hash: Some(b.block_hash),
                kind: FailureKind::SliceMismatch { slice_hash: slice.slice_hash, reason },
            })
        }
        Obj::Checkpoint(b, cp) => {
            let reason = match source.get(cp) {
                Ok(bytes) => decode(&bytes).err().map(|e| e.to_string()),
                Err(StoreError::ObjectNotFound(_)) if opts.allow_missing_checkpoints => None,
                Err(e) => Some(e.to_string()),
            };
            reason.map(|reason| ValidationFailure {
                sequence_number: b.sequence_number,
                block_hash: Some(b.block_hash),
                kind: FailureKind::CheckpointMismatch { checkpoint: *cp, reason },
            })
        }
    });
    failures.extend(object_failures.into_iter().flatten());
    let failure = failures.into_iter().min_by_key(|f| f.sequence_number);
    ValidationReport { blocks_checked, objects_checked, failure }
}
