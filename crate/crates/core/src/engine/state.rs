//! Engine state between invocations and its canonical checkpoint form.

use std::collections::BTreeMap;

use super::EngineError;
use crate::canonical::{self, Fields, Value};
use crate::dsl::{AggFunc, AggSpec, Operator, TypedPlan};
use crate::hash::ObjectHash;
use crate::schema::{ColumnType, SchemaDef};
use crate::store::{ObjectSource, ObjectStore, StoreError};
use crate::time::Timestamp;

const FORMAT: i64 = 1;

/// Running value of one aggregate within one window.
#[derive(Clone, Debug, PartialEq)]
pub enum Partial {
    Count(i64),
    SumInt(Option<i64>),
    SumFloat(Option<f64>),
    /// MIN or MAX so far; null until a non-null value arrives.
    Extreme(Value),
    AvgInt { sum: i64, count: i64 },
    AvgFloat { sum: f64, count: i64 },
}

impl Partial {
    pub fn empty(spec: &AggSpec) -> Partial {
        let float_arg = spec.arg.as_ref().is_some_and(|a| a.ty == crate::dsl::Ty::Col(ColumnType::Float64));
        match spec.func {
            AggFunc::Count => Partial::Count(0),
            AggFunc::Sum if float_arg => Partial::SumFloat(None),
            AggFunc::Sum => Partial::SumInt(None),
            AggFunc::Min | AggFunc::Max => Partial::Extreme(Value::Null),
            AggFunc::Avg if float_arg => Partial::AvgFloat { sum: 0.0, count: 0 },
            AggFunc::Avg => Partial::AvgInt { sum: 0, count: 0 },
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Partial::Count(n) => Value::Int(*n),
            Partial::SumInt(s) => s.map_or(Value::Null, Value::Int),
            Partial::SumFloat(s) => s.map_or(Value::Null, Value::Float),
            Partial::Extreme(v) => v.clone(),
            Partial::AvgInt { sum, count } => Value::map([("count", Value::Int(*count)), ("sum", Value::Int(*sum))]),
            Partial::AvgFloat { sum, count } => {
                Value::map([("count", Value::Int(*count)), ("sum", Value::Float(*sum))])
            }
        }
    }

    fn from_value(spec: &AggSpec, v: &Value, path: &str) -> Result<Partial, String> {
        let bad = || format!("{path}: unexpected {} for {}", v.kind(), spec.func.name());
        Ok(match (Partial::empty(spec), v) {
            (Partial::Count(_), Value::Int(n)) if *n >= 0 => Partial::Count(*n),
            (Partial::SumInt(_), Value::Null) => Partial::SumInt(None),
            (Partial::SumInt(_), Value::Int(n)) => Partial::SumInt(Some(*n)),
            (Partial::SumFloat(_), Value::Null) => Partial::SumFloat(None),
            (Partial::SumFloat(_), Value::Float(x)) => Partial::SumFloat(Some(*x)),
            (Partial::Extreme(_), v) => Partial::Extreme(spec.result.coerce_decoded(v)?),
            (Partial::AvgInt { .. }, Value::Map(_)) => {
                let f = Fields::new(path, v).map_err(|e| e.to_string())?;
                f.only(&["count", "sum"]).map_err(|e| e.to_string())?;
                Partial::AvgInt {
                    sum: f.i64("sum").map_err(|e| e.to_string())?,
                    count: f.i64("count").map_err(|e| e.to_string())?,
                }
            }
            (Partial::AvgFloat { .. }, Value::Map(m)) => {
                let f = Fields::new(path, v).map_err(|e| e.to_string())?;
                f.only(&["count", "sum"]).map_err(|e| e.to_string())?;
                let Some(Value::Float(sum)) = m.get("sum") else { return Err(bad()) };
                Partial::AvgFloat { sum: *sum, count: f.i64("count").map_err(|e| e.to_string())? }
            }
            _ => return Err(bad()),
        })
    }

    pub fn finish(&self) -> Value {
        match self {
            Partial::Count(n) => Value::Int(*n),
            Partial::SumInt(s) => s.map_or(Value::Null, Value::Int),
            Partial::SumFloat(s) => s.map_or(Value::Null, Value::Float),
            Partial::Extreme(v) => v.clone(),
            Partial::AvgInt { count: 0, .. } | Partial::AvgFloat { count: 0, .. } => Value::Null,
            Partial::AvgInt { sum, count } => Value::Float(*sum as f64 / *count as f64),
            Partial::AvgFloat { sum, count } => Value::Float(*sum / *count as f64),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowState {
    pub group: Vec<Value>,
    pub partials: Vec<Partial>,
    /// `(input index, offset)` of contributing records; only kept when tracking.
    pub contributors: Vec<(usize, u64)>,
}

impl PartialEq for WindowState {
    fn eq(&self, other: &Self) -> bool {
        self.group == other.group && self.partials == other.partials
    }
}

/// A join-side record waiting for its counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffered {
    pub offset: u64,
    pub event_time: Timestamp,
    pub payload: Vec<Value>,
}

impl Buffered {
    /// `[event_time, payload...]`
    pub fn row(&self) -> Vec<Value> {
        let mut row = Vec::with_capacity(self.payload.len() + 1);
        row.push(Value::Timestamp(self.event_time));
        row.extend(self.payload.iter().cloned());
        row
    }

    fn to_value(&self) -> Value {
        Value::map([
            ("event_time", Value::Timestamp(self.event_time)),
            ("offset", Value::Int(self.offset as i64)),
            ("payload", Value::Array(self.payload.clone())),
        ])
    }

    fn from_value(v: &Value, schema: &SchemaDef, path: &str) -> Result<Buffered, String> {
        let f = Fields::new(path, v).map_err(|e| e.to_string())?;
        f.only(&["event_time", "offset", "payload"]).map_err(|e| e.to_string())?;
        let payload = decode_payload(f.array("payload").map_err(|e| e.to_string())?, schema)?;
        Ok(Buffered {
            offset: f.u64("offset").map_err(|e| e.to_string())?,
            event_time: f.timestamp("event_time").map_err(|e| e.to_string())?,
            payload,
        })
    }
}

fn decode_payload(values: &[Value], schema: &SchemaDef) -> Result<Vec<Value>, String> {
    if values.len() != schema.len() {
        return Err(format!("payload has {} values, schema {}", values.len(), schema.len()));
    }
    let payload: Vec<Value> = schema
        .columns
        .iter()
        .zip(values)
        .map(|(c, v)| c.ty.coerce_decoded(v))
        .collect::<Result<_, _>>()?;
    schema.check_payload(&payload)?;
    Ok(payload)
}

/// Everything a plan remembers between requests.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    pub input_watermarks: Vec<Option<Timestamp>>,
    pub late_ignored_total: u64,
    /// Open windows keyed by `(window start ms, canonical group key)`.
    pub windows: BTreeMap<(i64, String), WindowState>,
    pub left_buffer: Vec<Buffered>,
    pub right_buffer: Vec<Buffered>,
}

impl EngineState {
    pub fn initial(plan: &TypedPlan) -> EngineState {
        EngineState {
            input_watermarks: vec![None; plan.inputs.len()],
            late_ignored_total: 0,
            windows: BTreeMap::new(),
            left_buffer: Vec::new(),
            right_buffer: Vec::new(),
        }
    }

    pub fn to_value(&self) -> Value {
        let windows = self
            .windows
            .iter()
            .map(|((start, _), w)| {
                Value::map([
                    ("aggregates", Value::Array(w.partials.iter().map(Partial::to_value).collect())),
                    ("group", Value::Array(w.group.clone())),
                    ("start", Value::Int(*start)),
                ])
            })
            .collect();
        Value::map([
            ("format", Value::Int(FORMAT)),
            ("input_watermarks", Value::Array(self.input_watermarks.iter().map(|w| Value::opt_timestamp(*w)).collect())),
            ("late_ignored_total", Value::Int(self.late_ignored_total as i64)),
            ("left_buffer", Value::Array(self.left_buffer.iter().map(Buffered::to_value).collect())),
            ("right_buffer", Value::Array(self.right_buffer.iter().map(Buffered::to_value).collect())),
            ("windows", Value::Array(windows)),
        ])
    }

    pub fn encode(&self) -> Vec<u8> {
        canonical::canonicalize(&self.to_value()).expect("engine state holds only finite values")
    }

    /// Decodes a checkpoint; the plan supplies the value types.
    pub fn decode(bytes: &[u8], plan: &TypedPlan) -> Result<EngineState, EngineError> {
        let malformed = EngineError::MalformedCheckpoint;
        let v = canonical::decode(bytes).map_err(|e| malformed(e.to_string()))?;
        if canonical::canonicalize(&v).ok().as_deref() != Some(bytes) {
            return Err(malformed("checkpoint is not in canonical form".into()));
        }
        Self::from_value(&v, plan).map_err(malformed)
    }

    fn from_value(v: &Value, plan: &TypedPlan) -> Result<EngineState, String> {
        let f = Fields::new("checkpoint", v).map_err(|e| e.to_string())?;
        f.only(&["format", "input_watermarks", "late_ignored_total", "left_buffer", "right_buffer", "windows"])
            .map_err(|e| e.to_string())?;
        if f.i64("format").map_err(|e| e.to_string())? != FORMAT {
            return Err("unsupported checkpoint format".into());
        }
        let wms = f.array("input_watermarks").map_err(|e| e.to_string())?;
        if wms.len() != plan.inputs.len() {
            return Err(format!("{} input watermarks for {} inputs", wms.len(), plan.inputs.len()));
        }
        let input_watermarks = wms
            .iter()
            .map(|w| if w.is_null() { Ok(None) } else { canonical::timestamp_from(w).map(Some) })
            .collect::<Result<Vec<_>, _>>()?;

        let mut windows = BTreeMap::new();
        let raw_windows = f.array("windows").map_err(|e| e.to_string())?;
        if let Operator::Windowed { group_by, aggregates, window_ms } = &plan.operator {
            let input = &plan.inputs[0].schema;
            let group_types: Vec<ColumnType> = group_by
                .iter()
                .map(|s| if *s == 0 { ColumnType::Timestamp } else { input.columns[s - 1].ty })
                .collect();
            for (i, w) in raw_windows.iter().enumerate() {
                let path = format!("windows[{i}]");
                let wf = Fields::new(&path, w).map_err(|e| e.to_string())?;
                wf.only(&["aggregates", "group", "start"]).map_err(|e| e.to_string())?;
                let start = wf.i64("start").map_err(|e| e.to_string())?;
                if start.rem_euclid(*window_ms) != 0 {
                    return Err(format!("{path}: start {start} is not a window boundary"));
                }
                let group_raw = wf.array("group").map_err(|e| e.to_string())?;
                if group_raw.len() != group_types.len() {
                    return Err(format!("{path}: wrong group width"));
                }
                let group: Vec<Value> = group_types
                    .iter()
                    .zip(group_raw)
                    .map(|(t, v)| t.coerce_decoded(v))
                    .collect::<Result<_, _>>()?;
                let aggs_raw = wf.array("aggregates").map_err(|e| e.to_string())?;
                if aggs_raw.len() != aggregates.len() {
                    return Err(format!("{path}: wrong aggregate count"));
                }
                let partials = aggregates
                    .iter()
                    .zip(aggs_raw)
                    .map(|(spec, v)| Partial::from_value(spec, v, &path))
                    .collect::<Result<Vec<_>, _>>()?;
                let key = (start, group_key(&group));
                if windows.insert(key, WindowState { group, partials, contributors: Vec::new() }).is_some() {
                    return Err(format!("{path}: duplicate window"));
                }
            }
        } else if !raw_windows.is_empty() {
            return Err("windows present for a plan without aggregation".into());
        }

        let mut buffers = [Vec::new(), Vec::new()];
        for (side, key) in ["left_buffer", "right_buffer"].iter().enumerate() {
            let raw = f.array(key).map_err(|e| e.to_string())?;
            if !raw.is_empty() && !matches!(plan.operator, Operator::Joined { .. }) {
                return Err(format!("{key} present for a plan without a join"));
            }
            let mut prev: Option<u64> = None;
            for (i, b) in raw.iter().enumerate() {
                let rec = Buffered::from_value(b, &plan.inputs[side].schema, &format!("{key}[{i}]"))?;
                if prev.is_some_and(|p| p >= rec.offset) {
                    return Err(format!("{key}[{i}]: offsets out of order"));
                }
                prev = Some(rec.offset);
                buffers[side].push(rec);
            }
        }
        let [left_buffer, right_buffer] = buffers;
        Ok(EngineState {
            input_watermarks,
            late_ignored_total: f.u64("late_ignored_total").map_err(|e| e.to_string())?,
            windows,
            left_buffer,
            right_buffer,
        })
    }
}

pub fn group_key(group: &[Value]) -> String {
    Value::Array(group.to_vec()).canonical_string()
}

/// Stores a checkpoint; identical states always yield the same hash.
pub fn checkpoint_save(store: &ObjectStore, state: &EngineState) -> Result<ObjectHash, StoreError> {
    store.put(&state.encode())
}

pub fn checkpoint_load(
    source: &dyn ObjectSource,
    hash: &ObjectHash,
    plan: &TypedPlan,
) -> Result<EngineState, EngineError> {
    let bytes = source.get(hash)?;
    EngineState::decode(&bytes, plan)
}
