//! Re-execution of recorded `ExecuteTransform` blocks: byte-compared for
//! verification, written back to rebuild deleted derivative objects, or run
//! with tracking to answer provenance queries.

use super::history::History;
use super::transform::{gather, monotone, to_records};
use super::{CoordinatorError, Result, Workspace};
use crate::canonical::Value;
use crate::chain::{DatasetId, DatasetKind, MetadataEvent};
use crate::engine::{execute, handle_query_change, EngineState, EngineVersion, OutputRow, TransformRequest};
use crate::hash::ObjectHash;
use crate::par::Parallelism;
use crate::slices::{encode_slice, slice_ref_for};
use crate::store::ObjectSource;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub sequence_number: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReproReport {
    pub dataset_id: DatasetId,
    pub blocks_verified: u64,
    /// The first block whose re-execution differs from the record.
    pub divergence: Option<Divergence>,
}

impl ReproReport {
    pub fn is_valid(&self) -> bool {
        self.divergence.is_none()
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("dataset_id", Value::str(self.dataset_id.to_string())),
            ("blocks_verified", Value::Int(self.blocks_verified as i64)),
            (
                "divergence",
                match &self.divergence {
                    None => Value::Null,
                    Some(d) => Value::map([
                        ("sequence_number", Value::Int(d.sequence_number as i64)),
                        ("message", Value::str(&d.message)),
                    ]),
                },
            ),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mode {
    Verify,
    /// Write recomputed slices and checkpoints that are missing.
    Restore,
    /// Record sources, stopping after block index `upto`.
    Track { upto: usize },
}

/// Output of one replayed block.
pub(crate) struct Step<'a> {
    pub block_index: usize,
    pub first_offset: u64,
    pub outputs: &'a [OutputRow],
}

pub(crate) struct Replayed {
    pub blocks: u64,
    pub restored: u64,
    pub divergence: Option<Divergence>,
}

pub(crate) fn replay(
    hist: &mut History<'_>,
    id: &DatasetId,
    mode: Mode,
    mut on_step: impl FnMut(&mut History<'_>, Step<'_>) -> Result<()>,
) -> Result<Replayed> {
    let ws = hist.ws;
    let chain = hist.chain(id)?;
    let mut out = Replayed { blocks: 0, restored: 0, divergence: None };
    let mut transform = None;
    let mut watermark = None;
    let mut next_offset = 0;
    // The in-memory state after the previous ExecuteTransform, with its plan
    // index, input ids and recorded checkpoint hash.
    let mut carried: Option<(usize, Vec<DatasetId>, Option<ObjectHash>, EngineState)> = None;

    for (idx, block) in chain.blocks().iter().enumerate() {
        if let MetadataEvent::SetTransform(t) = &block.event {
            transform = Some(t.clone());
        }
        let MetadataEvent::ExecuteTransform {
            input_slices,
            prior_checkpoint,
            new_checkpoint,
            output_slice,
            output_watermark,
            late_records_ignored,
        } = &block.event
        else {
            continue;
        };
        let diverge = |message: String| Divergence { sequence_number: block.sequence_number, message };
        let engine = &transform.as_ref().expect("placement rules require a transform").engine;
        if *engine != EngineVersion::current() {
            return Err(CoordinatorError::EngineVersionUnavailable(engine.clone()));
        }
        let compiled = hist.plan_for_block(id, idx)?;
        let ids: Vec<DatasetId> = input_slices.iter().map(|s| s.dataset_id).collect();

        let prior = match (prior_checkpoint, carried.take()) {
            (None, _) => None,
            (Some(h), Some((prev_idx, prev_ids, prev_cp, state))) if prev_cp == Some(*h) && prev_ids == ids => {
                let old = hist.plan_for_block(id, prev_idx)?;
                match handle_query_change(&old.plan, &compiled.plan, &state) {
                    Ok(s) => Some(s),
                    Err(_) => {
                        out.divergence = Some(diverge("checkpoint carried across an incompatible query change".into()));
                        break;
                    }
                }
            }
            (Some(h), _) => {
                out.divergence = Some(diverge(format!("prior checkpoint {h} is not the previous step's checkpoint")));
                break;
            }
        };

        let batches = gather(hist, &compiled, input_slices)?;
        let response = execute(TransformRequest {
            plan: &compiled.plan,
            inputs: batches,
            prior,
            tracking: matches!(mode, Mode::Track { .. }),
            parallelism: Parallelism::default(),
        })?;

        let records = to_records(&response.outputs, next_offset, block.system_time);
        let slice = if records.is_empty() {
            None
        } else {
            let bytes = encode_slice(&records, &compiled.plan.output_schema, next_offset, Parallelism::default())?;
            Some((slice_ref_for(ObjectHash::of(&bytes), &records), bytes))
        };
        let checkpoint_bytes = response.checkpoint.encode();
        let checkpoint = ObjectHash::of(&checkpoint_bytes);
        let wm = monotone(watermark, response.output_watermark);

        let mismatch = if slice.as_ref().map(|(r, _)| r) != output_slice.as_ref() {
            Some(match (output_slice, &slice) {
                (Some(rec), Some((got, _))) => format!("output slice {} recomputes as {}", rec.slice_hash, got.slice_hash),
                (Some(rec), None) => format!("output slice {} recomputes as no output", rec.slice_hash),
                (None, _) => "no output recorded but re-execution produces records".to_string(),
            })
        } else if *new_checkpoint != Some(checkpoint) {
            Some(format!("checkpoint recomputes as {checkpoint}"))
        } else if *output_watermark != wm {
            Some(format!("watermark recorded {output_watermark:?}, recomputed {wm:?}"))
        } else if *late_records_ignored != response.late_records_ignored {
            Some(format!(
                "late count recorded {late_records_ignored}, recomputed {}",
                response.late_records_ignored
            ))
        } else {
            None
        };
        if let Some(message) = mismatch {
            if mode == Mode::Verify {
                out.divergence = Some(diverge(message));
                break;
            }
            return Err(CoordinatorError::RestoreFailed { dataset: ws.label(id), message });
        }

        if mode == Mode::Restore {
            let store = ws.store();
            if let Some((r, bytes)) = &slice {
                if !store.contains(&r.slice_hash) {
                    store.put(bytes)?;
                    out.restored += 1;
                }
            }
            if !store.contains(&checkpoint) {
                store.put(&checkpoint_bytes)?;
                out.restored += 1;
            }
        }
        on_step(hist, Step { block_index: idx, first_offset: next_offset, outputs: &response.outputs })?;

        out.blocks += 1;
        watermark = *output_watermark;
        if let Some(s) = output_slice {
            next_offset = s.offset_end;
        }
        carried = Some((idx, ids, *new_checkpoint, response.checkpoint));
        if let Mode::Track { upto } = mode {
            if idx >= upto {
                break;
            }
        }
    }
    Ok(out)
}

impl Workspace {
    /// Re-executes every `ExecuteTransform` of a derivative and byte-compares
    /// slice, checkpoint, watermark and late count with the record.
    pub fn verify_reproducibility(&self, id: &DatasetId) -> Result<ReproReport> {
        let mut hist = History::new(self);
        let chain = hist.chain(id)?;
        if chain.state().kind != Some(DatasetKind::Derivative) {
            return Err(CoordinatorError::WrongKind { name: self.label(id), actual: DatasetKind::Root.name() });
        }
        let upstream = self.upstream(id)?;
        for input in &upstream {
            self.restore(input)?;
        }
        let r = replay(&mut hist, id, Mode::Verify, |_, _| Ok(()))?;
        Ok(ReproReport { dataset_id: *id, blocks_verified: r.blocks, divergence: r.divergence })
    }

    /// Recomputes any missing slices or checkpoints of `id` (inputs first).
    /// Returns the number of objects written per rebuilt dataset.
    pub fn materialize(&self, id: &DatasetId) -> Result<Vec<(DatasetId, u64)>> {
        let mut out = Vec::new();
        for d in self.topological(id)? {
            let n = self.restore(&d)?;
            if n > 0 {
                out.push((d, n));
            }
        }
        Ok(out)
    }

    fn restore(&self, id: &DatasetId) -> Result<u64> {
        let chain = self.chain(id)?;
        if chain.state().kind != Some(DatasetKind::Derivative) {
            return Ok(0);
        }
        let missing = chain.blocks().iter().any(|b| match &b.event {
            MetadataEvent::ExecuteTransform { output_slice, new_checkpoint, .. } => {
                output_slice.as_ref().is_some_and(|s| !self.store().contains(&s.slice_hash))
                    || new_checkpoint.is_some_and(|c| !self.store().contains(&c))
            }
            _ => false,
        });
        if !missing {
            return Ok(0);
        }
        let _lock = self.lock(id)?;
        let r = replay(&mut History::new(self), id, Mode::Restore, |_, _| Ok(()))?;
        Ok(r.restored)
    }
}
