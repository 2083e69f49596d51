//! Dataset-level lineage and record-level provenance.
//!
//! A derivative output's sources are found by re-executing its history with
//! per-record tracking: the engine reports, for every emitted row, the input
//! offsets that determined it (the source row of a projection, every member
//! of a window and group, the matched pair of a join or the lone left row of
//! a null-extended one). The search starts from the owning block, so only
//! records inside the recorded input intervals can appear.

use std::collections::{BTreeMap, BTreeSet};

use super::history::History;
use super::replay::{replay, Mode};
use super::{CoordinatorError, Result, Workspace};
use crate::canonical::Value;
use crate::chain::{DatasetId, DatasetKind, MetadataEvent};
use crate::engine::{execute, InputBatch, TransformRequest};
use crate::par::Parallelism;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineageNode {
    pub dataset_id: DatasetId,
    pub name: String,
    pub kind: DatasetKind,
}

/// The dataset-level input graph, inputs before consumers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    pub nodes: Vec<LineageNode>,
    /// `(input, consumer)` pairs.
    pub edges: Vec<(DatasetId, DatasetId)>,
}

impl Lineage {
    pub fn to_value(&self) -> Value {
        Value::map([
            (
                "nodes",
                Value::Array(
                    self.nodes
                        .iter()
                        .map(|n| {
                            Value::map([
                                ("dataset_id", Value::str(n.dataset_id.to_string())),
                                ("name", Value::str(&n.name)),
                                ("kind", Value::str(n.kind.name())),
                            ])
                        })
                        .collect(),
                ),
            ),
            (
                "edges",
                Value::Array(
                    self.edges
                        .iter()
                        .map(|(a, b)| Value::Array(vec![Value::str(a.to_string()), Value::str(b.to_string())]))
                        .collect(),
                ),
            ),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvenanceNode {
    pub dataset_id: DatasetId,
    pub name: String,
    pub kind: DatasetKind,
    pub offsets: BTreeSet<u64>,
    /// Sequence numbers of the blocks whose slices hold `offsets`.
    pub blocks: BTreeSet<u64>,
    pub children: Vec<ProvenanceNode>,
}

impl ProvenanceNode {
    pub fn to_value(&self) -> Value {
        Value::map([
            ("dataset_id", Value::str(self.dataset_id.to_string())),
            ("name", Value::str(&self.name)),
            ("kind", Value::str(self.kind.name())),
            ("offsets", Value::Array(self.offsets.iter().map(|o| Value::Int(*o as i64)).collect())),
            ("blocks", Value::Array(self.blocks.iter().map(|b| Value::Int(*b as i64)).collect())),
            ("children", Value::Array(self.children.iter().map(ProvenanceNode::to_value).collect())),
        ])
    }

    /// Every `(root dataset, offset)` at the leaves.
    pub fn root_records(&self) -> BTreeSet<(DatasetId, u64)> {
        if self.children.is_empty() && self.kind == DatasetKind::Root {
            return self.offsets.iter().map(|o| (self.dataset_id, *o)).collect();
        }
        self.children.iter().flat_map(ProvenanceNode::root_records).collect()
    }
}

/// Sources of selected outputs of one dataset, grouped by input dataset.
struct Sources {
    /// Block sequence number owning each traced offset.
    blocks: BTreeSet<u64>,
    by_input: BTreeMap<DatasetId, BTreeSet<u64>>,
    /// Per traced offset: `(input dataset, input offset)` pairs.
    per_offset: BTreeMap<u64, Vec<(DatasetId, u64)>>,
}

fn owning_block(hist: &mut History<'_>, id: &DatasetId, offset: u64) -> Result<(usize, u64)> {
    let chain = hist.chain(id)?;
    chain
        .blocks()
        .iter()
        .enumerate()
        .find(|(_, b)| b.event.output_slice().is_some_and(|s| s.offset_start <= offset && offset < s.offset_end))
        .map(|(i, b)| (i, b.sequence_number))
        .ok_or_else(|| CoordinatorError::OffsetNotFound { dataset: hist.ws.label(id), offset })
}

fn sources(hist: &mut History<'_>, id: &DatasetId, offsets: &BTreeSet<u64>) -> Result<Sources> {
    let mut blocks = BTreeSet::new();
    let mut upto = 0;
    for o in offsets {
        let (idx, seq) = owning_block(hist, id, *o)?;
        blocks.insert(seq);
        upto = upto.max(idx);
    }
    let chain = hist.chain(id)?;
    let mut per_offset: BTreeMap<u64, Vec<(DatasetId, u64)>> = BTreeMap::new();
    replay(hist, id, Mode::Track { upto }, |hist, step| {
        let compiled = hist.plan_for_block(id, step.block_index)?;
        let MetadataEvent::ExecuteTransform { input_slices, .. } = &chain.blocks()[step.block_index].event else {
            unreachable!("replay only steps through ExecuteTransform blocks");
        };
        for (i, row) in step.outputs.iter().enumerate() {
            let offset = step.first_offset + i as u64;
            if offsets.contains(&offset) {
                let srcs = row
                    .sources
                    .iter()
                    .map(|(scan, o)| (input_slices[compiled.scan_inputs[*scan]].dataset_id, *o))
                    .collect();
                per_offset.insert(offset, srcs);
            }
        }
        Ok(())
    })?;
    let mut by_input: BTreeMap<DatasetId, BTreeSet<u64>> = BTreeMap::new();
    for (ds, o) in per_offset.values().flatten() {
        by_input.entry(*ds).or_default().insert(*o);
    }
    Ok(Sources { blocks, by_input, per_offset })
}

fn trace_set(hist: &mut History<'_>, id: &DatasetId, offsets: BTreeSet<u64>) -> Result<ProvenanceNode> {
    let chain = hist.chain(id)?;
    let kind = chain.state().kind.ok_or(crate::chain::ChainError::EmptyChain)?;
    let name = chain.state().name.clone();
    if kind == DatasetKind::Root {
        let mut blocks = BTreeSet::new();
        for o in &offsets {
            blocks.insert(owning_block(hist, id, *o)?.1);
        }
        return Ok(ProvenanceNode { dataset_id: *id, name, kind, offsets, blocks, children: Vec::new() });
    }
    let found = sources(hist, id, &offsets)?;
    let mut children = Vec::with_capacity(found.by_input.len());
    for (input, input_offsets) in found.by_input {
        children.push(trace_set(hist, &input, input_offsets)?);
    }
    Ok(ProvenanceNode { dataset_id: *id, name, kind, offsets, blocks: found.blocks, children })
}

impl Workspace {
    pub fn lineage(&self, id: &DatasetId) -> Result<Lineage> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for d in self.topological(id)? {
            let chain = self.chain(&d)?;
            let state = chain.state();
            if let Some(t) = &state.transform {
                edges.extend(t.inputs.iter().map(|i| (*i, d)));
            }
            nodes.push(LineageNode {
                dataset_id: d,
                name: state.name.clone(),
                kind: state.kind.ok_or(crate::chain::ChainError::EmptyChain)?,
            });
        }
        Ok(Lineage { nodes, edges })
    }

    /// Traces record `offset` of `id` down to the root records it derives from.
    pub fn trace(&self, id: &DatasetId, offset: u64) -> Result<ProvenanceNode> {
        self.materialize(id)?;
        trace_set(&mut History::new(self), id, BTreeSet::from([offset]))
    }

    /// Re-runs the plan that produced record `offset` of derivative `id` on
    /// only the input records its trace names, with closed watermarks, and
    /// reports whether the record is among the outputs.
    pub fn check_provenance(&self, id: &DatasetId, offset: u64) -> Result<bool> {
        Ok(self.check_provenance_many(id, &BTreeSet::from([offset]))?[&offset])
    }

    /// [`Workspace::check_provenance`] for many records with one replay.
    pub fn check_provenance_many(&self, id: &DatasetId, offsets: &BTreeSet<u64>) -> Result<BTreeMap<u64, bool>> {
        self.materialize(id)?;
        let mut hist = History::new(self);
        let chain = hist.chain(id)?;
        if chain.state().kind != Some(DatasetKind::Derivative) {
            return Err(CoordinatorError::WrongKind { name: self.label(id), actual: DatasetKind::Root.name() });
        }
        let found = sources(&mut hist, id, offsets)?;
        let mut out = BTreeMap::new();
        for &offset in offsets {
            let (idx, _) = owning_block(&mut hist, id, offset)?;
            let compiled = hist.plan_for_block(id, idx)?;
            let MetadataEvent::ExecuteTransform { input_slices, .. } = &chain.blocks()[idx].event else {
                unreachable!("derivative slices come from ExecuteTransform blocks");
            };
            let named = found.per_offset.get(&offset).cloned().unwrap_or_default();
            let mut batches = Vec::with_capacity(compiled.scan_inputs.len());
            for (scan, &i) in compiled.scan_inputs.iter().enumerate() {
                let ds = input_slices[i].dataset_id;
                let wanted: BTreeSet<u64> = named.iter().filter(|(d, _)| *d == ds).map(|(_, o)| *o).collect();
                let mut records = Vec::with_capacity(wanted.len());
                if let (Some(lo), Some(hi)) = (wanted.first(), wanted.last()) {
                    let schema = &compiled.plan.inputs[scan].schema;
                    records = hist.read_records(&ds, *lo, hi + 1, schema)?;
                    records.retain(|r| wanted.contains(&r.offset));
                }
                batches.push(InputBatch { records, watermark: Some(Timestamp::MAX) });
            }
            let response = execute(TransformRequest {
                plan: &compiled.plan,
                inputs: batches,
                prior: None,
                tracking: false,
                parallelism: Parallelism::default(),
            })?;
            let traced = hist.read_records(id, offset, offset + 1, &compiled.plan.output_schema)?;
            let traced = traced.first().ok_or_else(|| CoordinatorError::OffsetNotFound { dataset: self.label(id), offset })?;
            let reproduced = response.outputs.iter().any(|o| o.event_time == traced.event_time && o.payload == traced.payload);
            out.insert(offset, reproduced);
        }
        Ok(out)
    }
}
