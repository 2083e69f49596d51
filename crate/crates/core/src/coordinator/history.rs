//! Schema eras and per-block plans, reconstructed from the chains.
//!
//! Nothing about a derivative's output schema is stored: it is whatever the
//! query in effect compiles to against its inputs' schemas at the offsets
//! the block consumed. Each input's schema at offset `e` is the schema of
//! the slice holding record `e - 1` (or the first declared schema when
//! `e == 0`), which depends only on blocks that existed when the consuming
//! block was written. Replays therefore always rebuild the plan a block was
//! produced with.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::{CoordinatorError, Result, Workspace};
use crate::canonical::Value;
use crate::chain::{Chain, DatasetId, DatasetKind, MetadataEvent, TransformDef};
use crate::dsl::{compile, InputDef, TypedPlan};
use crate::schema::SchemaDef;
use crate::slices::{read_slice, Record};

/// A plan plus, for each scan, the index of the transform input it reads.
#[derive(Clone, Debug)]
pub(crate) struct Compiled {
    pub plan: TypedPlan,
    pub scan_inputs: Vec<usize>,
}

pub(crate) struct History<'w> {
    pub ws: &'w Workspace,
    chains: HashMap<DatasetId, Rc<Chain>>,
    plans: HashMap<(DatasetId, usize), Rc<Compiled>>,
}

impl<'w> History<'w> {
    pub fn new(ws: &'w Workspace) -> Self {
        History { ws, chains: HashMap::new(), plans: HashMap::new() }
    }

    pub fn chain(&mut self, id: &DatasetId) -> Result<Rc<Chain>> {
        if let Some(c) = self.chains.get(id) {
            return Ok(c.clone());
        }
        if self.ws.head(id)?.is_none() {
            return Err(CoordinatorError::MissingInput(*id));
        }
        let c = Rc::new(self.ws.chain(id)?);
        self.chains.insert(*id, c.clone());
        Ok(c)
    }

    /// Schema and event-time column of `id`'s records at offsets below `end`.
    pub fn era_at(&mut self, id: &DatasetId, end: u64) -> Result<InputDef> {
        let chain = self.chain(id)?;
        match chain.state().kind {
            Some(DatasetKind::Root) => {
                let mut current = None;
                for b in chain.blocks() {
                    match &b.event {
                        MetadataEvent::SetPollingSource(src) => {
                            current = Some(src);
                            if end == 0 {
                                break;
                            }
                        }
                        MetadataEvent::AddData { output_slice: Some(s), .. } if s.offset_end >= end => break,
                        _ => {}
                    }
                }
                let src = current.ok_or_else(|| no_schema(self.ws, id))?;
                Ok(InputDef { schema: src.schema.clone(), event_time_column: src.event_time_column.clone() })
            }
            Some(DatasetKind::Derivative) => {
                let compiled = if end == 0 {
                    let first = chain.blocks().iter().find_map(|b| match &b.event {
                        MetadataEvent::SetTransform(t) => Some(t.clone()),
                        _ => None,
                    });
                    let t = first.ok_or_else(|| no_schema(self.ws, id))?;
                    Rc::new(self.compile(&t, &vec![0; t.inputs.len()])?)
                } else {
                    let idx = chain
                        .blocks()
                        .iter()
                        .position(|b| b.event.output_slice().is_some_and(|s| s.offset_end >= end))
                        .ok_or(CoordinatorError::OffsetNotFound { dataset: self.ws.label(id), offset: end - 1 })?;
                    self.plan_for_block(id, idx)?
                };
                Ok(InputDef {
                    schema: compiled.plan.output_schema.clone(),
                    event_time_column: compiled.plan.event_time_column.clone(),
                })
            }
            None => Err(no_schema(self.ws, id)),
        }
    }

    /// The schema new records of `id` are written in.
    pub fn current_schema(&mut self, id: &DatasetId) -> Result<SchemaDef> {
        let chain = self.chain(id)?;
        let state = chain.state();
        match (&state.polling_source, &state.transform) {
            (Some(src), _) => Ok(src.schema.clone()),
            (None, Some(t)) => {
                let t = t.clone();
                Ok(self.compile_current(&t)?.plan.output_schema)
            }
            _ => Err(no_schema(self.ws, id)),
        }
    }

    /// Compiles `t` against each input's schema at the offsets given.
    pub fn compile(&mut self, t: &TransformDef, ends: &[u64]) -> Result<Compiled> {
        let mut defs = BTreeMap::new();
        let mut names = Vec::with_capacity(t.inputs.len());
        for (input, end) in t.inputs.iter().zip(ends) {
            let name = self.chain(input)?.state().name.clone();
            let def = self.era_at(input, *end)?;
            if defs.insert(name.clone(), def).is_some() {
                return Err(CoordinatorError::InputMismatch(format!("two inputs are named {name:?}")));
            }
            names.push(name);
        }
        let plan = compile(&t.query, &defs)?;
        let mut scan_inputs = Vec::with_capacity(plan.inputs.len());
        for scan in &plan.inputs {
            let idx = names.iter().position(|n| *n == scan.table).expect("analyze resolves tables against the inputs");
            if scan_inputs.contains(&idx) {
                return Err(CoordinatorError::InputMismatch(format!("{:?} is scanned twice", scan.table)));
            }
            scan_inputs.push(idx);
        }
        if scan_inputs.len() != t.inputs.len() {
            let unused: Vec<&str> = (0..names.len())
                .filter(|i| !scan_inputs.contains(i))
                .map(|i| names[i].as_str())
                .collect();
            return Err(CoordinatorError::InputMismatch(format!("inputs not read by the query: {}", unused.join(", "))));
        }
        Ok(Compiled { plan, scan_inputs })
    }

    /// Compiles `t` against each input as it currently stands.
    pub fn compile_current(&mut self, t: &TransformDef) -> Result<Compiled> {
        let mut ends = Vec::with_capacity(t.inputs.len());
        for input in &t.inputs {
            ends.push(self.chain(input)?.state().next_offset);
        }
        self.compile(t, &ends)
    }

    /// The plan the `ExecuteTransform` at block index `idx` of `id` ran.
    pub fn plan_for_block(&mut self, id: &DatasetId, idx: usize) -> Result<Rc<Compiled>> {
        if let Some(p) = self.plans.get(&(*id, idx)) {
            return Ok(p.clone());
        }
        let chain = self.chain(id)?;
        let prefix = &chain.blocks()[..=idx];
        let transform = prefix
            .iter()
            .rev()
            .find_map(|b| match &b.event {
                MetadataEvent::SetTransform(t) => Some(t.clone()),
                _ => None,
            })
            .ok_or_else(|| no_schema(self.ws, id))?;
        let MetadataEvent::ExecuteTransform { input_slices, .. } = &prefix[idx].event else {
            panic!("block {idx} is not an ExecuteTransform");
        };
        let ends: Vec<u64> = input_slices.iter().map(|s| s.offset_end).collect();
        let compiled = Rc::new(self.compile(&transform, &ends)?);
        self.plans.insert((*id, idx), compiled.clone());
        Ok(compiled)
    }

    /// The schema the slice of block `idx` of `id` was written in.
    pub fn slice_schema(&mut self, id: &DatasetId, idx: usize) -> Result<SchemaDef> {
        let chain = self.chain(id)?;
        match &chain.blocks()[idx].event {
            MetadataEvent::AddData { .. } => Ok(chain.blocks()[..idx]
                .iter()
                .rev()
                .find_map(|b| match &b.event {
                    MetadataEvent::SetPollingSource(src) => Some(src.schema.clone()),
                    _ => None,
                })
                .ok_or_else(|| no_schema(self.ws, id))?),
            _ => Ok(self.plan_for_block(id, idx)?.plan.output_schema.clone()),
        }
    }

    /// Records of `id` with offsets in `[start, end)`, projected onto `target`.
    pub fn read_records(&mut self, id: &DatasetId, start: u64, end: u64, target: &SchemaDef) -> Result<Vec<Record>> {
        let chain = self.chain(id)?;
        let mut out = Vec::new();
        if start >= end {
            return Ok(out);
        }
        for (idx, b) in chain.blocks().iter().enumerate() {
            let Some(slice) = b.event.output_slice() else { continue };
            if slice.offset_end <= start || slice.offset_start >= end {
                continue;
            }
            let schema = self.slice_schema(id, idx)?;
            let records = read_slice(self.ws.store(), slice, &schema)?;
            for mut r in records.into_iter().filter(|r| r.offset >= start && r.offset < end) {
                if schema != *target {
                    r.payload = project_to(&schema, target, r.payload).map_err(|message| {
                        CoordinatorError::SchemaIncompatible {
                            dataset: self.ws.label(id),
                            schema: target.clone(),
                            message,
                        }
                    })?;
                }
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// Maps a payload between schemas by column name. Columns missing from
/// `from` become null; they must be nullable in `to`.
pub fn project_to(from: &SchemaDef, to: &SchemaDef, payload: Vec<Value>) -> Result<Vec<Value>, String> {
    let mut out = Vec::with_capacity(to.len());
    for col in &to.columns {
        let v = match from.index_of(&col.name) {
            Some(i) => {
                if from.columns[i].ty != col.ty {
                    return Err(format!("column {:?} changed type to {}", col.name, col.ty));
                }
                payload[i].clone()
            }
            None => Value::Null,
        };
        if v.is_null() && !col.nullable {
            return Err(format!("column {:?} is required", col.name));
        }
        out.push(v);
    }
    Ok(out)
}

fn no_schema(ws: &Workspace, id: &DatasetId) -> CoordinatorError {
    crate::chain::ChainError::IllegalEventForKind {
        event: "read",
        reason: format!("{} declares no source or transform", ws.label(id)),
    }
    .into()
}
