//! Bitemporal records and the slice objects that hold them.
//!
//! A slice is one content-store object: records in offset order, one
//! canonical map per line, each line ending in `\n`. Every line carries
//! `offset`, `system_time`, `event_time`, optionally `observed`, and one key
//! per schema column (nulls explicit).

use std::collections::BTreeMap;
use std::fmt;

use crate::canonical::{canonicalize_line, decode, timestamp_from, DecodeError, Fields, Value};
use crate::hash::ObjectHash;
use crate::par::{self, Parallelism};
use crate::schema::SchemaDef;
use crate::store::{ObjectSource, ObjectStore, StoreError};
use crate::time::Timestamp;

/// Change-data-capture marker on snapshot-merged records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Observed {
    Added,
    Removed,
    Changed,
}

impl Observed {
    pub fn code(self) -> &'static str {
        match self {
            Observed::Added => "A",
            Observed::Removed => "R",
            Observed::Changed => "C",
        }
    }

    pub fn parse(code: &str) -> Option<Self> {
        match code {
            "A" => Some(Observed::Added),
            "R" => Some(Observed::Removed),
            "C" => Some(Observed::Changed),
            _ => None,
        }
    }
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub offset: u64,
    pub system_time: Timestamp,
    pub event_time: Timestamp,
    pub observed: Option<Observed>,
    /// One value per schema column, in schema order.
    pub payload: Vec<Value>,
}

impl Record {
    pub fn to_value(&self, schema: &SchemaDef) -> Value {
        let mut map = BTreeMap::new();
        map.insert("offset".to_string(), Value::Int(self.offset as i64));
        map.insert("system_time".to_string(), Value::Timestamp(self.system_time));
        map.insert("event_time".to_string(), Value::Timestamp(self.event_time));
        if let Some(op) = self.observed {
            map.insert("observed".to_string(), Value::str(op.code()));
        }
        for (col, v) in schema.columns.iter().zip(&self.payload) {
            map.insert(col.name.clone(), v.clone());
        }
        Value::Map(map)
    }

    pub fn from_value(value: &Value, schema: &SchemaDef) -> Result<Record, String> {
        let f = Fields::new("", value).map_err(|e| e.to_string())?;
        let map = value.as_map().expect("checked by Fields::new");
        let observed = match map.get("observed") {
            None => None,
            Some(Value::String(code)) => {
                Some(Observed::parse(code).ok_or_else(|| format!("bad observed code {code:?}"))?)
            }
            Some(other) => return Err(format!("observed: expected string, found {}", other.kind())),
        };
        let expected = 3 + usize::from(observed.is_some()) + schema.len();
        if map.len() != expected {
            let extra = map
                .keys()
                .find(|k| {
                    !matches!(k.as_str(), "offset" | "system_time" | "event_time" | "observed")
                        && schema.index_of(k).is_none()
                })
                .cloned();
            return Err(match extra {
                Some(k) => format!("column {k:?} is not in the schema"),
                None => "record is missing schema columns".to_string(),
            });
        }
        let mut payload = Vec::with_capacity(schema.len());
        for col in &schema.columns {
            let raw = map.get(&col.name).ok_or_else(|| format!("missing column {:?}", col.name))?;
            let v = col.ty.coerce_decoded(raw).map_err(|e| format!("column {:?}: {e}", col.name))?;
            if v.is_null() && !col.nullable {
                return Err(format!("column {:?} is not nullable", col.name));
            }
            payload.push(v);
        }
        let ts = |key: &str| -> Result<Timestamp, String> {
            timestamp_from(f.get(key).map_err(|e| e.to_string())?).map_err(|e| format!("{key}: {e}"))
        };
        Ok(Record {
            offset: f.u64("offset").map_err(|e| e.to_string())?,
            system_time: ts("system_time")?,
            event_time: ts("event_time")?,
            observed,
            payload,
        })
    }
}

/// Pointer from a metadata block to a slice object.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SliceRef {
    pub slice_hash: ObjectHash,
    pub offset_start: u64,
    /// Exclusive.
    pub offset_end: u64,
    pub event_time_min: Timestamp,
    pub event_time_max: Timestamp,
    pub record_count: u64,
}

impl SliceRef {
    pub fn to_value(&self) -> Value {
        Value::map([
            ("slice_hash", Value::hash(&self.slice_hash)),
            ("offset_start", Value::Int(self.offset_start as i64)),
            ("offset_end", Value::Int(self.offset_end as i64)),
            ("event_time_min", Value::Timestamp(self.event_time_min)),
            ("event_time_max", Value::Timestamp(self.event_time_max)),
            ("record_count", Value::Int(self.record_count as i64)),
        ])
    }

    pub fn from_fields(f: &Fields<'_>) -> Result<Self, DecodeError> {
        f.only(&[
            "slice_hash",
            "offset_start",
            "offset_end",
            "event_time_min",
            "event_time_max",
            "record_count",
        ])?;
        let r = SliceRef {
            slice_hash: f.hash("slice_hash")?,
            offset_start: f.u64("offset_start")?,
            offset_end: f.u64("offset_end")?,
            event_time_min: f.timestamp("event_time_min")?,
            event_time_max: f.timestamp("event_time_max")?,
            record_count: f.u64("record_count")?,
        };
        if r.record_count == 0 || r.offset_end.checked_sub(r.offset_start) != Some(r.record_count) {
            return Err(f.err("record_count", "must be positive and equal offset_end - offset_start"));
        }
        if r.event_time_min > r.event_time_max {
            return Err(f.err("event_time_min", "exceeds event_time_max"));
        }
        Ok(r)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SliceError {
    #[error("schema violation at offset {offset}: {message}")]
    SchemaViolation { offset: u64, message: String },
    #[error("offset gap: expected {expected}, found {found}")]
    OffsetGap { expected: u64, found: u64 },
    #[error("records in one slice must share a system time")]
    MixedSystemTime,
    #[error("empty input")]
    EmptyInput,
    #[error("slice does not match its reference: {0}")]
    RefMismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Exact `(min, max)` of the records' event times.
pub fn event_time_range(records: &[Record]) -> Result<(Timestamp, Timestamp), SliceError> {
    let first = records.first().ok_or(SliceError::EmptyInput)?.event_time;
    Ok(records.iter().fold((first, first), |(lo, hi), r| (lo.min(r.event_time), hi.max(r.event_time))))
}

/// Encodes `records` into slice bytes after checking the slice invariants.
pub fn encode_slice(
    records: &[Record],
    schema: &SchemaDef,
    starting_offset: u64,
    mode: Parallelism,
) -> Result<Vec<u8>, SliceError> {
    let first = records.first().ok_or(SliceError::EmptyInput)?;
    for (i, r) in records.iter().enumerate() {
        let expected = starting_offset + i as u64;
        if r.offset != expected {
            return Err(SliceError::OffsetGap { expected, found: r.offset });
        }
        if r.system_time != first.system_time {
            return Err(SliceError::MixedSystemTime);
        }
        schema
            .check_payload(&r.payload)
            .map_err(|message| SliceError::SchemaViolation { offset: r.offset, message })?;
    }
    let lines = par::try_map(mode, records, |r| {
        canonicalize_line(&r.to_value(schema))
            .map_err(|e| SliceError::SchemaViolation { offset: r.offset, message: e.to_string() })
    })?;
    Ok(lines.concat())
}

/// Decodes slice bytes with `schema`.
pub fn decode_slice(bytes: &[u8], schema: &SchemaDef, mode: Parallelism) -> Result<Vec<Record>, SliceError> {
    if bytes.last() != Some(&b'\n') {
        return Err(SliceError::SchemaViolation { offset: 0, message: "slice must end with a newline".into() });
    }
    let lines: Vec<&[u8]> = bytes[..bytes.len() - 1].split(|&b| b == b'\n').collect();
    par::try_map(mode, &lines, |line| {
        let v = decode(line)
            .map_err(|e| SliceError::SchemaViolation { offset: 0, message: e.to_string() })?;
        let record = Record::from_value(&v, schema).map_err(|message| SliceError::SchemaViolation {
            offset: v.as_map().and_then(|m| m.get("offset")).and_then(|o| match o {
                Value::Int(i) => Some(*i as u64),
                _ => None,
            }).unwrap_or(0),
            message,
        })?;
        // Non-canonical lines would hash differently from a re-encoding.
        let canonical = canonicalize_line(&record.to_value(schema))
            .map_err(|e| SliceError::SchemaViolation { offset: record.offset, message: e.to_string() })?;
        if canonical[..canonical.len() - 1] != **line {
            return Err(SliceError::SchemaViolation {
                offset: record.offset,
                message: "line is not in canonical form".into(),
            });
        }
        Ok(record)
    })
}

/// Writes a slice of records and returns its reference.
pub fn write_slice(
    store: &ObjectStore,
    records: &[Record],
    schema: &SchemaDef,
    starting_offset: u64,
) -> Result<SliceRef, SliceError> {
    let bytes = encode_slice(records, schema, starting_offset, Parallelism::default())?;
    let slice_hash = store.put(&bytes)?;
    Ok(slice_ref_for(slice_hash, records))
}

/// The reference describing already-validated `records` stored under `slice_hash`.
pub fn slice_ref_for(slice_hash: ObjectHash, records: &[Record]) -> SliceRef {
    let (event_time_min, event_time_max) = event_time_range(records).expect("non-empty slice");
    let offset_start = records[0].offset;
    SliceRef {
        slice_hash,
        offset_start,
        offset_end: offset_start + records.len() as u64,
        event_time_min,
        event_time_max,
        record_count: records.len() as u64,
    }
}

/// Reads the records behind `slice`, checking them against the reference.
pub fn read_slice(
    store: &dyn ObjectSource,
    slice: &SliceRef,
    schema: &SchemaDef,
) -> Result<Vec<Record>, SliceError> {
    let bytes = store.get(&slice.slice_hash)?;
    let records = decode_slice(&bytes, schema, Parallelism::default())?;
    check_against_ref(&records, slice)?;
    Ok(records)
}

/// Schema-free structural check of slice bytes against their reference:
/// canonical lines, dense offsets, record count and event-time range.
pub fn check_slice_bytes(bytes: &[u8], slice: &SliceRef) -> Result<(), String> {
    if bytes.last() != Some(&b'\n') {
        return Err("slice must end with a newline".into());
    }
    let mut count = 0u64;
    let mut range: Option<(Timestamp, Timestamp)> = None;
    for line in bytes[..bytes.len() - 1].split(|&b| b == b'\n') {
        let v = decode(line).map_err(|e| e.to_string())?;
        if crate::canonical::canonicalize(&v).map_err(|e| e.to_string())? != line {
            return Err(format!("line {count} is not canonical"));
        }
        let f = Fields::new(format!("line {count}"), &v).map_err(|e| e.to_string())?;
        let offset = f.u64("offset").map_err(|e| e.to_string())?;
        if offset != slice.offset_start + count {
            return Err(format!("offset {offset} out of sequence"));
        }
        let t = f.timestamp("event_time").map_err(|e| e.to_string())?;
        f.timestamp("system_time").map_err(|e| e.to_string())?;
        range = Some(range.map_or((t, t), |(lo, hi)| (lo.min(t), hi.max(t))));
        count += 1;
    }
    if count != slice.record_count {
        return Err(format!("{count} records, reference says {}", slice.record_count));
    }
    if range != Some((slice.event_time_min, slice.event_time_max)) {
        return Err("event time range differs from reference".into());
    }
    Ok(())
}

pub(crate) fn check_against_ref(records: &[Record], slice: &SliceRef) -> Result<(), SliceError> {
    if records.len() as u64 != slice.record_count {
        return Err(SliceError::RefMismatch(format!(
            "{} records, reference says {}",
            records.len(),
            slice.record_count
        )));
    }
    for (i, r) in records.iter().enumerate() {
        let expected = slice.offset_start + i as u64;
        if r.offset != expected {
            return Err(SliceError::OffsetGap { expected, found: r.offset });
        }
    }
    let (lo, hi) = event_time_range(records)?;
    if (lo, hi) != (slice.event_time_min, slice.event_time_max) {
        return Err(SliceError::RefMismatch("event time range differs".into()));
    }
    Ok(())
}
