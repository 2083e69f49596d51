//! Bringing external data into root datasets.
//!
//! Ledger sources are append-only: rows whose primary key was already
//! ingested are dropped. Snapshot sources are full state dumps that get
//! historized by diffing against the state projected from earlier events.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::canonical::Value;
use crate::chain::SourceFormat;
use crate::schema::{ColumnType, SchemaDef};
use crate::slices::{Observed, Record};
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("parse failure at row {row}: {message}")]
    ParseFailure { row: usize, message: String },
    #[error("row {row} has no event time in column {column:?}")]
    MissingEventTime { row: usize, column: String },
    #[error("type mismatch at row {row}, column {column:?}: {message}")]
    TypeMismatch { row: usize, column: String, message: String },
    #[error("key {key} appears twice in one batch with different payloads")]
    DuplicateKeyWithinBatchConflict { key: String },
    #[error("key {key} appears twice in one snapshot")]
    DuplicateKeyInSnapshot { key: String },
    #[error("invalid event sequence at offset {offset}: {message}")]
    InvalidEventSequence { offset: u64, message: String },
    #[error("unknown primary key column {0:?}")]
    UnknownKeyColumn(String),
    #[error("cannot read source {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A typed source row.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceRow {
    /// 1-based data row (CSV, excluding header) or line (ndjson).
    pub row: usize,
    pub payload: Vec<Value>,
    pub event_time: Option<Timestamp>,
}

/// Reads and type-checks a source file.
pub fn read_source(
    path: &Path,
    format: SourceFormat,
    schema: &SchemaDef,
    event_time_column: Option<&str>,
) -> Result<Vec<SourceRow>, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    parse_source(&bytes, format, schema, event_time_column)
}

/// Parses source bytes. Parsing is strict: unknown columns or keys are
/// rejected, missing ones are null (and rejected if not nullable).
pub fn parse_source(
    bytes: &[u8],
    format: SourceFormat,
    schema: &SchemaDef,
    event_time_column: Option<&str>,
) -> Result<Vec<SourceRow>, IngestError> {
    let rows = match format {
        SourceFormat::Csv => parse_csv(bytes, schema)?,
        SourceFormat::Ndjson => parse_ndjson(bytes, schema)?,
    };
    let et_index = match event_time_column {
        Some(col) => Some(schema.index_of(col).ok_or_else(|| IngestError::ParseFailure {
            row: 0,
            message: format!("event time column {col:?} not in schema"),
        })?),
        None => None,
    };
    rows.into_iter()
        .map(|(row, payload)| {
            let event_time = match et_index {
                None => None,
                Some(i) => match &payload[i] {
                    Value::Timestamp(t) => Some(*t),
                    _ => {
                        return Err(IngestError::MissingEventTime {
                            row,
                            column: event_time_column.unwrap_or_default().to_string(),
                        })
                    }
                },
            };
            Ok(SourceRow { row, payload, event_time })
        })
        .collect()
}

fn parse_csv(bytes: &[u8], schema: &SchemaDef) -> Result<Vec<(usize, Vec<Value>)>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::ParseFailure { row: 0, message: e.to_string() })?
        .clone();
    let mut positions = vec![None; schema.len()];
    for (pos, name) in headers.iter().enumerate() {
        let idx = schema.index_of(name).ok_or_else(|| IngestError::ParseFailure {
            row: 0,
            message: format!("unknown column {name:?} in header"),
        })?;
        if positions[idx].replace(pos).is_some() {
            return Err(IngestError::ParseFailure { row: 0, message: format!("duplicate column {name:?} in header") });
        }
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IngestError::ParseFailure { row, message: e.to_string() })?;
        let mut payload = Vec::with_capacity(schema.len());
        for (col, pos) in schema.columns.iter().zip(&positions) {
            let text = pos.and_then(|p| record.get(p));
            let value = match text {
                None => Value::Null,
                Some("") if col.nullable || col.ty != ColumnType::String => Value::Null,
                Some(t) => parse_text(t, col.ty).map_err(|message| IngestError::ParseFailure {
                    row,
                    message: format!("column {:?}: {message}", col.name),
                })?,
            };
            if value.is_null() && !col.nullable {
                return Err(IngestError::ParseFailure { row, message: format!("column {:?} is required", col.name) });
            }
            payload.push(value);
        }
        out.push((row, payload));
    }
    Ok(out)
}

fn parse_text(text: &str, ty: ColumnType) -> Result<Value, String> {
    match ty {
        ColumnType::String => Ok(Value::str(text)),
        ColumnType::Int64 => text.trim().parse::<i64>().map(Value::Int).map_err(|e| format!("{text:?}: {e}")),
        ColumnType::Float64 => match text.trim().parse::<f64>() {
            Ok(f) if f.is_finite() => Ok(Value::Float(f)),
            Ok(_) => Err(format!("{text:?} is not finite")),
            Err(e) => Err(format!("{text:?}: {e}")),
        },
        ColumnType::Bool => match text.trim() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("{text:?} is not a bool")),
        },
        ColumnType::Timestamp => {
            Timestamp::parse(text.trim()).map(Value::Timestamp).map_err(|e| e.to_string())
        }
    }
}

fn parse_ndjson(bytes: &[u8], schema: &SchemaDef) -> Result<Vec<(usize, Vec<Value>)>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let row = i + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let json: serde_json::Value = serde_json::from_slice(line)
            .map_err(|e| IngestError::ParseFailure { row, message: e.to_string() })?;
        let serde_json::Value::Object(map) = json else {
            return Err(IngestError::ParseFailure { row, message: "expected a JSON object".into() });
        };
        if let Some(k) = map.keys().find(|k| schema.index_of(k).is_none()) {
            return Err(IngestError::ParseFailure { row, message: format!("unknown key {k:?}") });
        }
        let mut payload = Vec::with_capacity(schema.len());
        for col in &schema.columns {
            let mismatch = |message: String| IngestError::TypeMismatch { row, column: col.name.clone(), message };
            let value = match (col.ty, map.get(&col.name)) {
                (_, None | Some(serde_json::Value::Null)) => Value::Null,
                (ColumnType::String, Some(serde_json::Value::String(s))) => Value::str(s),
                (ColumnType::Bool, Some(serde_json::Value::Bool(b))) => Value::Bool(*b),
                (ColumnType::Int64, Some(serde_json::Value::Number(n))) => {
                    Value::Int(n.as_i64().ok_or_else(|| mismatch(format!("{n} is not a 64-bit integer")))?)
                }
                (ColumnType::Float64, Some(serde_json::Value::Number(n))) => {
                    Value::Float(n.as_f64().filter(|f| f.is_finite()).ok_or_else(|| mismatch(format!("{n}")))?)
                }
                (ColumnType::Timestamp, Some(serde_json::Value::String(s))) => Value::Timestamp(
                    Timestamp::parse(s).map_err(|e| IngestError::ParseFailure {
                        row,
                        message: format!("column {:?}: {e}", col.name),
                    })?,
                ),
                (ty, Some(other)) => return Err(mismatch(format!("expected {ty}, found {other}"))),
            };
            if value.is_null() && !col.nullable {
                return Err(IngestError::ParseFailure { row, message: format!("column {:?} is required", col.name) });
            }
            payload.push(value);
        }
        out.push((row, payload));
    }
    Ok(out)
}

/// Column indices of `primary_key` in `schema`.
pub fn key_indices(schema: &SchemaDef, primary_key: &[String]) -> Result<Vec<usize>, IngestError> {
    primary_key
        .iter()
        .map(|k| schema.index_of(k).ok_or_else(|| IngestError::UnknownKeyColumn(k.clone())))
        .collect()
}

/// Canonical encoding of a row's key columns. Sorting by this string is the
/// canonical key order.
pub fn row_key(payload: &[Value], key: &[usize]) -> String {
    Value::Array(key.iter().map(|&i| payload[i].clone()).collect()).canonical_string()
}

/// Drops rows whose key was already ingested, in source order. `seen_keys`
/// is updated with the survivors.
pub fn merge_ledger(
    new_rows: Vec<SourceRow>,
    seen_keys: &mut HashSet<String>,
    key: &[usize],
) -> Result<Vec<SourceRow>, IngestError> {
    let mut batch: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<SourceRow> = Vec::new();
    for row in new_rows {
        let k = row_key(&row.payload, key);
        if seen_keys.contains(&k) {
            continue;
        }
        if let Some(&i) = batch.get(&k) {
            if out[i].payload != row.payload {
                return Err(IngestError::DuplicateKeyWithinBatchConflict { key: k });
            }
            continue;
        }
        batch.insert(k, out.len());
        out.push(row);
    }
    seen_keys.extend(batch.into_keys());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdcEvent {
    pub observed: Observed,
    pub key: String,
    pub payload: Vec<Value>,
}

/// Diffs a snapshot against the previous state. Output is sorted by the
/// canonical key encoding.
pub fn merge_snapshot(
    prev_state: &BTreeMap<String, Vec<Value>>,
    snapshot_rows: &[Vec<Value>],
    key: &[usize],
) -> Result<Vec<CdcEvent>, IngestError> {
    let mut snapshot: BTreeMap<String, &Vec<Value>> = BTreeMap::new();
    for row in snapshot_rows {
        let k = row_key(row, key);
        if snapshot.insert(k.clone(), row).is_some() {
            return Err(IngestError::DuplicateKeyInSnapshot { key: k });
        }
    }
    let mut events = Vec::new();
    for (k, row) in &snapshot {
        match prev_state.get(k) {
            None => events.push(CdcEvent { observed: Observed::Added, key: k.clone(), payload: (*row).clone() }),
            Some(old) if old != *row => {
                events.push(CdcEvent { observed: Observed::Changed, key: k.clone(), payload: (*row).clone() })
            }
            Some(_) => {}
        }
    }
    for (k, old) in prev_state {
        if !snapshot.contains_key(k) {
            events.push(CdcEvent { observed: Observed::Removed, key: k.clone(), payload: old.clone() });
        }
    }
    events.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(events)
}

/// Replays events in offset order (optionally only those with
/// `system_time <= as_of`) into the live rows keyed by primary key.
///
/// Records without an `observed` marker (ledger merges) are upserts.
pub fn project_state(
    events: &[Record],
    key: &[usize],
    as_of: Option<Timestamp>,
) -> Result<BTreeMap<String, Vec<Value>>, IngestError> {
    let mut ordered: Vec<&Record> = events.iter().filter(|r| as_of.is_none_or(|t| r.system_time <= t)).collect();
    ordered.sort_by_key(|r| r.offset);
    let mut state = BTreeMap::new();
    for r in ordered {
        let k = row_key(&r.payload, key);
        let invalid = |message: &str| IngestError::InvalidEventSequence { offset: r.offset, message: message.into() };
        match r.observed {
            None => {
                state.insert(k, r.payload.clone());
            }
            Some(Observed::Added) => {
                if state.insert(k, r.payload.clone()).is_some() {
                    return Err(invalid("A for a key that is already live"));
                }
            }
            Some(Observed::Changed) => match state.get_mut(&k) {
                Some(v) => *v = r.payload.clone(),
                None => return Err(invalid("C for a key that is not live")),
            },
            Some(Observed::Removed) => {
                if state.remove(&k).is_none() {
                    return Err(invalid("R for a key that is not live"));
                }
            }
        }
    }
    Ok(state)
}
