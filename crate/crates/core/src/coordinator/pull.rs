use super::{IngestOutcome, Result, Workspace};
use crate::canonical::Value;
use crate::chain::{DatasetId, DatasetKind};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PullAction {
    Ingested { records: u64, sequence_number: u64 },
    Transformed { records: u64, sequence_number: u64 },
    /// Missing derivative slices or checkpoints were recomputed.
    Restored { objects: u64 },
    Failed(String),
    /// An input failed or was skipped.
    Skipped,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PullReport {
    /// Only datasets where something happened, in processing order.
    pub actions: Vec<(DatasetId, String, PullAction)>,
}

impl PullReport {
    pub fn is_success(&self) -> bool {
        !self.actions.iter().any(|(_, _, a)| matches!(a, PullAction::Failed(_) | PullAction::Skipped))
    }

    pub fn to_value(&self) -> Value {
        let actions = self.actions.iter().map(|(id, name, a)| {
            let (kind, detail) = match a {
                PullAction::Ingested { records, sequence_number } => {
                    ("ingested", Value::map([
                        ("records", Value::Int(*records as i64)),
                        ("sequence_number", Value::Int(*sequence_number as i64)),
                    ]))
                }
                PullAction::Transformed { records, sequence_number } => {
                    ("transformed", Value::map([
                        ("records", Value::Int(*records as i64)),
                        ("sequence_number", Value::Int(*sequence_number as i64)),
                    ]))
                }
                PullAction::Restored { objects } => ("restored", Value::map([("objects", Value::Int(*objects as i64))])),
                PullAction::Failed(e) => ("failed", Value::map([("error", Value::str(e))])),
                PullAction::Skipped => ("skipped", Value::map::<String>([])),
            };
            Value::map([
                ("dataset_id", Value::str(id.to_string())),
                ("name", Value::str(name)),
                ("action", Value::str(kind)),
                ("detail", detail),
            ])
        });
        Value::map([("actions", Value::Array(actions.collect()))])
    }
}

impl Workspace {
    /// Brings `id` up to date: ingests roots that have a source, rebuilds
    /// missing derivative objects, and runs transforms, inputs first.
    pub fn pull(&self, id: &DatasetId, system_time: Timestamp) -> Result<PullReport> {
        let order = self.topological(id)?;
        let mut report = PullReport::default();
        let mut broken: Vec<DatasetId> = Vec::new();
        for d in order {
            let name = self.label(&d);
            let chain = self.chain(&d)?;
            let state = chain.state();
            let inputs = state.transform.as_ref().map(|t| t.inputs.clone()).unwrap_or_default();
            if inputs.iter().any(|i| broken.contains(i)) {
                broken.push(d);
                report.actions.push((d, name, PullAction::Skipped));
                continue;
            }
            let outcome: Result<Vec<PullAction>> = match state.kind {
                Some(DatasetKind::Root) => match self.source_path(&d)? {
                    None => Ok(vec![]),
                    Some(path) => self.ingest_round(&d, Some(&path), system_time).map(|o| match o {
                        IngestOutcome::Appended { block, records } => {
                            vec![PullAction::Ingested { records, sequence_number: block.sequence_number }]
                        }
                        _ => vec![],
                    }),
                },
                _ => (|| {
                    let mut acts = Vec::new();
                    let restored: u64 = self.materialize(&d)?.iter().filter(|(x, _)| *x == d).map(|(_, n)| n).sum();
                    if restored > 0 {
                        acts.push(PullAction::Restored { objects: restored });
                    }
                    if let Some(block) = self.run_transform(&d, system_time)? {
                        let records = block.event.output_slice().map_or(0, |s| s.record_count);
                        acts.push(PullAction::Transformed { records, sequence_number: block.sequence_number });
                    }
                    Ok(acts)
                })(),
            };
            match outcome {
                Ok(acts) => report.actions.extend(acts.into_iter().map(|a| (d, name.clone(), a))),
                Err(e) => {
                    broken.push(d);
                    report.actions.push((d, name, PullAction::Failed(e.to_string())));
                }
            }
        }
        Ok(report)
    }
}
