use std::collections::HashSet;
use std::path::Path;

use super::history::History;
use super::{effective_time, CoordinatorError, Result, Workspace};
use crate::chain::{DatasetId, MergeStrategy, MetadataBlock, MetadataEvent};
use crate::hash::ObjectHash;
use crate::ingest::{key_indices, merge_ledger, merge_snapshot, parse_source, project_state, row_key, IngestError};
use crate::slices::{write_slice, Record};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq)]
pub enum IngestOutcome {
    Appended { block: MetadataBlock, records: u64 },
    /// The source bytes are those of the last ingested round.
    SourceUnchanged,
    /// The source parsed but held nothing not already in the dataset.
    NothingNew,
}

impl Workspace {
    /// Reads the dataset's source (or `source`, if given) and appends what
    /// is new.
    pub fn ingest_round(&self, id: &DatasetId, source: Option<&Path>, system_time: Timestamp) -> Result<IngestOutcome> {
        let path = match source {
            Some(p) => p.to_path_buf(),
            None => self.source_path(id)?.ok_or_else(|| CoordinatorError::NoSource(self.label(id)))?,
        };
        let bytes = std::fs::read(&path)
            .map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
        self.ingest_bytes(id, &bytes, system_time)
    }

    /// One ingestion round over in-memory source bytes.
    pub fn ingest_bytes(&self, id: &DatasetId, bytes: &[u8], system_time: Timestamp) -> Result<IngestOutcome> {
        let _lock = self.lock(id)?;
        let mut hist = History::new(self);
        let chain = hist.chain(id)?;
        let Some(src) = chain.state().polling_source.clone() else {
            return Err(CoordinatorError::WrongKind {
                name: self.label(id),
                actual: chain.state().kind.map_or("empty", |k| k.name()),
            });
        };
        let fingerprint = ObjectHash::of(bytes);
        let last_fingerprint = chain.blocks().iter().rev().find_map(|b| match &b.event {
            MetadataEvent::AddData { source_fingerprint, .. } => Some(*source_fingerprint),
            _ => None,
        });
        if last_fingerprint == Some(fingerprint) {
            return Ok(IngestOutcome::SourceUnchanged);
        }

        let rows = parse_source(bytes, src.format, &src.schema, src.event_time_column.as_deref())?;
        let key = key_indices(&src.schema, src.merge.primary_key())?;
        let state = chain.state();
        // The de-dup index and prior state are rebuilt from the slices.
        let existing = hist.read_records(id, 0, state.next_offset, &src.schema)?;
        let st = effective_time(&chain, system_time);
        let start = state.next_offset;

        let records: Vec<Record> = match &src.merge {
            MergeStrategy::Ledger { .. } => {
                let mut seen: HashSet<String> = existing.iter().map(|r| row_key(&r.payload, &key)).collect();
                let fresh = merge_ledger(rows, &mut seen, &key)?;
                fresh
                    .into_iter()
                    .enumerate()
                    .map(|(i, row)| Record {
                        offset: start + i as u64,
                        system_time: st,
                        event_time: row.event_time.expect("ledger sources have an event time column"),
                        observed: None,
                        payload: row.payload,
                    })
                    .collect()
            }
            MergeStrategy::Snapshot { .. } => {
                let prev = project_state(&existing, &key, None)?;
                let payloads: Vec<_> = rows.into_iter().map(|r| r.payload).collect();
                merge_snapshot(&prev, &payloads, &key)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, e)| Record {
                        offset: start + i as u64,
                        system_time: st,
                        event_time: st,
                        observed: Some(e.observed),
                        payload: e.payload,
                    })
                    .collect()
            }
        };
        if records.is_empty() {
            return Ok(IngestOutcome::NothingNew);
        }

        let prior_max = chain.blocks().iter().filter_map(|b| b.event.output_slice()).map(|s| s.event_time_max).max();
        let batch_max = records.iter().map(|r| r.event_time).max();
        let max_event_time = prior_max.max(batch_max).expect("records is non-empty");
        let lateness = i64::try_from(src.allowed_lateness_ms).expect("checked by the polling source");
        let candidate = max_event_time.saturating_add_ms(-lateness);
        let output_watermark = Some(state.watermark.map_or(candidate, |w| w.max(candidate)));

        let slice = write_slice(self.store(), &records, &src.schema, start)?;
        let event = MetadataEvent::AddData { output_slice: Some(slice), output_watermark, source_fingerprint: fingerprint };
        let mut chain = (*chain).clone();
        let block = chain.append(self.store(), event, st)?.clone();
        self.set_head(id, &block.block_hash)?;
        Ok(IngestOutcome::Appended { block, records: records.len() as u64 })
    }
}
