use super::history::{Compiled, History};
use super::{effective_time, CoordinatorError, Result, Workspace};
use crate::chain::{DatasetId, InputSlice, MetadataBlock, MetadataEvent};
use crate::engine::{checkpoint_load, checkpoint_save, execute, handle_query_change, InputBatch, OutputRow, TransformRequest};
use crate::par::Parallelism;
use crate::slices::{write_slice, Record};
use crate::time::Timestamp;

/// Reads the recorded intervals into one batch per plan scan.
pub(crate) fn gather(hist: &mut History<'_>, compiled: &Compiled, intervals: &[InputSlice]) -> Result<Vec<InputBatch>> {
    let mut batches = Vec::with_capacity(compiled.scan_inputs.len());
    for (scan, &i) in compiled.scan_inputs.iter().enumerate() {
        let s = &intervals[i];
        let records =
            hist.read_records(&s.dataset_id, s.offset_start, s.offset_end, &compiled.plan.inputs[scan].schema)?;
        batches.push(InputBatch { records, watermark: s.watermark });
    }
    Ok(batches)
}

/// Assigns offsets and system time to engine output.
pub(crate) fn to_records(rows: &[OutputRow], start: u64, system_time: Timestamp) -> Vec<Record> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| Record {
            offset: start + i as u64,
            system_time,
            event_time: r.event_time,
            observed: None,
            payload: r.payload.clone(),
        })
        .collect()
}

/// A watermark once published is never retracted: a reset plan whose
/// bound trails the old one keeps the old value.
pub(crate) fn monotone(prev: Option<Timestamp>, new: Option<Timestamp>) -> Option<Timestamp> {
    match (prev, new) {
        (Some(p), Some(n)) => Some(p.max(n)),
        (Some(p), None) => Some(p),
        (None, n) => n,
    }
}

impl Workspace {
    /// Feeds every input's records and watermark beyond the last processed
    /// offsets through the engine and appends an `ExecuteTransform`.
    /// Returns `None` when there is nothing new.
    pub fn run_transform(&self, id: &DatasetId, system_time: Timestamp) -> Result<Option<MetadataBlock>> {
        self.materialize(id)?;
        let _lock = self.lock(id)?;
        let mut hist = History::new(self);
        let chain = hist.chain(id)?;
        let Some(transform) = chain.state().transform.clone() else {
            return Err(CoordinatorError::WrongKind {
                name: self.label(id),
                actual: chain.state().kind.map_or("empty", |k| k.name()),
            });
        };
        for input in &transform.inputs {
            if input == id || self.upstream(input)?.contains(id) {
                return Err(CoordinatorError::CycleDetected(self.label(id)));
            }
        }

        let last = chain.blocks().iter().enumerate().rev().find_map(|(idx, b)| match &b.event {
            MetadataEvent::ExecuteTransform { input_slices, new_checkpoint, .. } => {
                Some((idx, input_slices.clone(), *new_checkpoint))
            }
            _ => None,
        });
        let mut intervals = Vec::with_capacity(transform.inputs.len());
        for input in &transform.inputs {
            let (start, prev_wm) = last
                .as_ref()
                .and_then(|(_, slices, _)| slices.iter().find(|s| s.dataset_id == *input))
                .map_or((0, None), |s| (s.offset_end, s.watermark));
            let state = hist.chain(input)?.state().clone();
            if state.next_offset < start {
                return Err(CoordinatorError::InputMismatch(format!(
                    "{} has fewer records than already processed",
                    self.label(input)
                )));
            }
            intervals.push((
                InputSlice { dataset_id: *input, offset_start: start, offset_end: state.next_offset, watermark: state.watermark },
                prev_wm,
            ));
        }
        if intervals.iter().all(|(s, prev_wm)| s.offset_start == s.offset_end && s.watermark == *prev_wm) {
            return Ok(None);
        }
        let intervals: Vec<InputSlice> = intervals.into_iter().map(|(s, _)| s).collect();
        let ends: Vec<u64> = intervals.iter().map(|s| s.offset_end).collect();
        let compiled = hist.compile(&transform, &ends)?;

        let mut prior = None;
        let mut prior_checkpoint = None;
        if let Some((idx, slices, Some(cp))) = &last {
            let same_inputs = slices.iter().map(|s| s.dataset_id).eq(transform.inputs.iter().copied());
            if same_inputs {
                let old = hist.plan_for_block(id, *idx)?;
                let state = checkpoint_load(self.store(), cp, &old.plan)?;
                if let Ok(carried) = handle_query_change(&old.plan, &compiled.plan, &state) {
                    prior = Some(carried);
                    prior_checkpoint = Some(*cp);
                }
            }
        }

        let batches = gather(&mut hist, &compiled, &intervals)?;
        let response = execute(TransformRequest {
            plan: &compiled.plan,
            inputs: batches,
            prior,
            tracking: false,
            parallelism: Parallelism::default(),
        })?;

        let st = effective_time(&chain, system_time);
        let start = chain.state().next_offset;
        let records = to_records(&response.outputs, start, st);
        let output_slice = match records.is_empty() {
            true => None,
            false => Some(write_slice(self.store(), &records, &compiled.plan.output_schema, start)?),
        };
        let new_checkpoint = checkpoint_save(self.store(), &response.checkpoint)?;
        let event = MetadataEvent::ExecuteTransform {
            input_slices: intervals,
            prior_checkpoint,
            new_checkpoint: Some(new_checkpoint),
            output_slice,
            output_watermark: monotone(chain.state().watermark, response.output_watermark),
            late_records_ignored: response.late_records_ignored,
        };
        let mut chain = (*chain).clone();
        let block = chain.append(self.store(), event, st)?.clone();
        self.set_head(id, &block.block_hash)?;
        Ok(Some(block))
    }
}
