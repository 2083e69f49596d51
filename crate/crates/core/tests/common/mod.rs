//! Fixtures and a brute-force batch oracle shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use odf_core::canonical::Value;
use odf_core::dsl::{compile, InputDef, Operator, TypedPlan};
use odf_core::engine::{eval, execute, is_true, EngineState, InputBatch, OutputRow, TransformRequest};
use odf_core::par::Parallelism;
use odf_core::schema::{Column, ColumnType, SchemaDef};
use odf_core::{Record, Timestamp};
use rand::Rng;

pub mod corpus;

pub const DAY: i64 = 86_400_000;

pub fn schema(cols: &[(&str, ColumnType, bool)]) -> SchemaDef {
    SchemaDef::new(cols.iter().map(|(n, t, nullable)| Column::new(*n, *t, *nullable)).collect()).unwrap()
}

pub fn ts(ms: i64) -> Timestamp {
    Timestamp::from_millis(ms).unwrap()
}

pub fn record(offset: u64, event_ms: i64, payload: Vec<Value>) -> Record {
    Record { offset, system_time: Timestamp::EPOCH, event_time: ts(event_ms), observed: None, payload }
}

/// Orders/shipments inputs; event times mirrored in `order_time` and `shipment_time`.
pub fn orders_shipments() -> BTreeMap<String, InputDef> {
    BTreeMap::from([
        (
            "orders".to_string(),
            InputDef {
                schema: schema(&[("order_time", ColumnType::Timestamp, false), ("order_id", ColumnType::Int64, false)]),
                event_time_column: Some("order_time".into()),
            },
        ),
        (
            "shipments".to_string(),
            InputDef {
                schema: schema(&[
                    ("shipment_time", ColumnType::Timestamp, false),
                    ("shipment_id", ColumnType::Int64, false),
                    ("order_id", ColumnType::Int64, false),
                ]),
                event_time_column: Some("shipment_time".into()),
            },
        ),
    ])
}

pub const LATE_SHIPMENTS: &str = "SELECT o.order_time, o.order_id
FROM orders as o
LEFT JOIN shipments as s
  ON o.order_id = s.order_id
  AND s.shipment_time BETWEEN
    o.order_time AND o.order_time + INTERVAL '1' WEEK
WHERE s.shipment_id IS NULL";

/// Single input `t(k string, v int64 nullable, x float64)`.
pub fn kv_input() -> BTreeMap<String, InputDef> {
    BTreeMap::from([(
        "t".to_string(),
        InputDef {
            schema: schema(&[
                ("k", ColumnType::String, false),
                ("v", ColumnType::Int64, true),
                ("x", ColumnType::Float64, false),
            ]),
            event_time_column: None,
        },
    )])
}

pub const STATELESS_Q: &str = "SELECT k, v * 2 AS v2, x FROM t WHERE v IS NULL OR v > 3";
pub const WINDOWED_Q: &str = "SELECT event_time AS w, k, COUNT(*) AS n, SUM(v) AS s, MIN(x) AS lo, MAX(v) AS hi, AVG(x) AS m
FROM t WHERE x < 90.0 GROUP BY TUMBLE(event_time, INTERVAL '10' SECOND), k";

pub fn plan(query: &str, inputs: &BTreeMap<String, InputDef>) -> TypedPlan {
    compile(query, inputs).unwrap_or_else(|e| panic!("{e}"))
}

pub fn kv_record<R: Rng>(rng: &mut R, offset: u64, event_ms: i64) -> Record {
    let k = ["a", "b", "c"][rng.gen_range(0..3)];
    let v = if rng.gen_bool(0.15) { Value::Null } else { Value::Int(rng.gen_range(-5..20)) };
    let x = (rng.gen_range(0..1000) as f64) / 10.0;
    record(offset, event_ms, vec![Value::str(k), v, Value::Float(x)])
}

pub fn order<R: Rng>(rng: &mut R, offset: u64, event_ms: i64, ids: i64) -> Record {
    record(offset, event_ms, vec![Value::Timestamp(ts(event_ms)), Value::Int(rng.gen_range(0..ids))])
}

pub fn shipment<R: Rng>(rng: &mut R, offset: u64, event_ms: i64, ids: i64) -> Record {
    record(
        offset,
        event_ms,
        vec![Value::Timestamp(ts(event_ms)), Value::Int(offset as i64), Value::Int(rng.gen_range(0..ids))],
    )
}

/// Runs requests in sequence, threading the checkpoint through its
/// canonical encoding (kept in memory when tracking, since contributor
/// lists are not part of the checkpoint). Returns all outputs and the final state.
pub fn run_requests(
    plan: &TypedPlan,
    requests: Vec<Vec<InputBatch>>,
    mode: Parallelism,
    tracking: bool,
) -> (Vec<OutputRow>, EngineState, u64) {
    let mut prior: Option<EngineState> = None;
    let mut outputs = Vec::new();
    let mut late = 0;
    for inputs in requests {
        let prior_state = match prior.take() {
            Some(s) if !tracking => Some(EngineState::decode(&s.encode(), plan).expect("checkpoint decodes")),
            other => other,
        };
        let resp = execute(TransformRequest { plan, inputs, prior: prior_state, tracking, parallelism: mode })
            .expect("execute");
        outputs.extend(resp.outputs);
        late += resp.late_records_ignored;
        prior = Some(resp.checkpoint);
    }
    (outputs, prior.expect("at least one request"), late)
}

fn input_row(r: &Record) -> Vec<Value> {
    let mut row = vec![Value::Timestamp(r.event_time)];
    row.extend(r.payload.iter().cloned());
    row
}

/// Brute-force relational evaluation over complete inputs (nothing late).
/// Rows are `(event_time, payload)`, in the engine's specified order.
pub fn batch_oracle(plan: &TypedPlan, inputs: &[Vec<Record>]) -> Vec<(Timestamp, Vec<Value>)> {
    let pass = |row: &[Value]| plan.filter.as_ref().is_none_or(|f| is_true(&eval(f, row).unwrap()));
    let project = |row: &[Value]| plan.outputs.iter().map(|o| eval(o, row).unwrap()).collect::<Vec<_>>();
    match &plan.operator {
        Operator::Stateless => inputs[0]
            .iter()
            .map(|r| (r, input_row(r)))
            .filter(|(_, row)| pass(row))
            .map(|(r, row)| (r.event_time, project(&row)))
            .collect(),
        Operator::Windowed { window_ms, group_by, aggregates } => {
            let mut groups: BTreeMap<(i64, String), (Vec<Value>, Vec<Vec<Value>>)> = BTreeMap::new();
            for r in &inputs[0] {
                let row = input_row(r);
                if !pass(&row) {
                    continue;
                }
                let start = r.event_time.millis().div_euclid(*window_ms) * window_ms;
                let group: Vec<Value> = group_by.iter().map(|s| row[*s].clone()).collect();
                let key = Value::Array(group.clone()).canonical_string();
                groups.entry((start, key)).or_insert_with(|| (group, Vec::new())).1.push(row);
            }
            groups
                .into_iter()
                .map(|((start, _), (group, rows))| {
                    let mut out = vec![Value::Timestamp(ts(start))];
                    out.extend(group);
                    for spec in aggregates {
                        let vals: Vec<Value> = rows
                            .iter()
                            .map(|row| spec.arg.as_ref().map_or(Value::Bool(true), |a| eval(a, row).unwrap()))
                            .filter(|v| !v.is_null())
                            .collect();
                        out.push(aggregate(spec.func.name(), &vals));
                    }
                    (ts(start), project(&out))
                })
                .collect()
        }
        Operator::Joined { kind, keys, upper_bound_ms } => {
            let mut out = Vec::new();
            let right_width = plan.inputs[1].schema.len() + 1;
            for l in &inputs[0] {
                let lrow = input_row(l);
                let lkey: Vec<Value> = keys.iter().map(|(k, _)| eval(k, &lrow).unwrap()).collect();
                let mut matched = false;
                for r in &inputs[1] {
                    let rrow = input_row(r);
                    let rkey: Vec<Value> = keys.iter().map(|(_, k)| eval(k, &rrow).unwrap()).collect();
                    let in_range = r.event_time >= l.event_time
                        && r.event_time.millis() as i128 <= l.event_time.millis() as i128 + *upper_bound_ms as i128;
                    if lkey.iter().any(Value::is_null) || lkey != rkey || !in_range {
                        continue;
                    }
                    matched = true;
                    let mut row = lrow.clone();
                    row.extend(rrow);
                    if pass(&row) {
                        out.push((l.event_time, project(&row)));
                    }
                }
                if !matched && *kind == odf_core::dsl::JoinKind::Left {
                    let mut row = lrow.clone();
                    row.extend(std::iter::repeat_n(Value::Null, right_width));
                    if pass(&row) {
                        out.push((l.event_time, project(&row)));
                    }
                }
            }
            out
        }
    }
}

fn aggregate(func: &str, vals: &[Value]) -> Value {
    let as_f = |v: &Value| match v {
        Value::Int(i) => *i as f64,
        Value::Float(x) => *x,
        _ => unreachable!(),
    };
    match func {
        "COUNT" => Value::Int(vals.len() as i64),
        _ if vals.is_empty() => Value::Null,
        "SUM" => match vals[0] {
            Value::Int(_) => Value::Int(vals.iter().map(|v| if let Value::Int(i) = v { *i } else { 0 }).sum()),
            _ => Value::Float(vals.iter().map(as_f).sum()),
        },
        "AVG" => match vals[0] {
            Value::Int(_) => {
                Value::Float(vals.iter().map(|v| if let Value::Int(i) = v { *i } else { 0 }).sum::<i64>() as f64 / vals.len() as f64)
            }
            _ => Value::Float(vals.iter().map(as_f).sum::<f64>() / vals.len() as f64),
        },
        "MIN" => vals.iter().cloned().reduce(|a, b| if less(&b, &a) { b } else { a }).unwrap(),
        "MAX" => vals.iter().cloned().reduce(|a, b| if less(&a, &b) { b } else { a }).unwrap(),
        _ => unreachable!(),
    }
}

fn less(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x < y,
        (Value::Float(x), Value::Float(y)) => x < y,
        (Value::String(x), Value::String(y)) => x < y,
        (Value::Timestamp(x), Value::Timestamp(y)) => x < y,
        (Value::Bool(x), Value::Bool(y)) => x < y,
        _ => false,
    }
}

/// Output rows as comparable `(event_time, payload)` pairs.
pub fn rows(outputs: &[OutputRow]) -> Vec<(Timestamp, Vec<Value>)> {
    outputs.iter().map(|o| (o.event_time, o.payload.clone())).collect()
}

pub fn sorted(mut v: Vec<(Timestamp, Vec<Value>)>) -> Vec<(Timestamp, Vec<Value>)> {
    v.sort_by_key(|(t, p)| (*t, Value::Array(p.clone()).canonical_string()));
    v
}

/// Input streams cut into watermark segments. Each segment ends with one
/// new watermark per input; the last segment closes every input.
pub struct Scenario {
    pub inputs: Vec<Vec<Record>>,
    /// `(exclusive end index per input, watermark per input)`.
    pub segments: Vec<(Vec<usize>, Vec<Option<Timestamp>>)>,
}

impl Scenario {
    /// One request per segment.
    pub fn baseline(&self) -> Vec<Vec<InputBatch>> {
        let mut starts = vec![0; self.inputs.len()];
        let mut out = Vec::new();
        for (ends, wms) in &self.segments {
            out.push(
                (0..self.inputs.len())
                    .map(|i| InputBatch { records: self.inputs[i][starts[i]..ends[i]].to_vec(), watermark: wms[i] })
                    .collect(),
            );
            starts.clone_from(ends);
        }
        out
    }

    /// Every segment split into random sub-requests; only the last one of a
    /// segment carries its new watermark.
    pub fn partitioned<R: Rng>(&self, rng: &mut R) -> Vec<Vec<InputBatch>> {
        let n = self.inputs.len();
        let mut starts = vec![0; n];
        let mut prev_wms = vec![None; n];
        let mut out = Vec::new();
        for (ends, wms) in &self.segments {
            let parts = rng.gen_range(1..=4);
            let mut cuts: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut c: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(starts[i]..=ends[i])).collect();
                    c.sort();
                    c.push(ends[i]);
                    c
                })
                .collect();
            let mut pos = starts.clone();
            for p in 0..parts {
                let last = p + 1 == parts;
                out.push(
                    (0..n)
                        .map(|i| {
                            let end = cuts[i][p];
                            let batch = InputBatch {
                                records: self.inputs[i][pos[i]..end].to_vec(),
                                watermark: if last { wms[i] } else { prev_wms[i] },
                            };
                            pos[i] = end;
                            batch
                        })
                        .collect(),
                );
            }
            cuts.clear();
            starts.clone_from(ends);
            prev_wms.clone_from(wms);
        }
        out
    }

    /// All records in one request with closing watermarks.
    pub fn single_close(&self) -> Vec<Vec<InputBatch>> {
        vec![self
            .inputs
            .iter()
            .map(|r| InputBatch { records: r.clone(), watermark: Some(Timestamp::MAX) })
            .collect()]
    }

    /// Watermarks that never make a record late: the lowest event time
    /// still to come, then a close.
    pub fn with_perfect_watermarks(mut self) -> Scenario {
        for (ends, wms) in &mut self.segments {
            for (i, recs) in self.inputs.iter().enumerate() {
                wms[i] = match recs[ends[i]..].iter().map(|r| r.event_time).min() {
                    Some(t) => Some(t),
                    None => Some(Timestamp::MAX),
                };
            }
        }
        if let Some((_, wms)) = self.segments.last_mut() {
            wms.iter_mut().for_each(|w| *w = Some(Timestamp::MAX));
        }
        self
    }
}

/// Random event streams for a plan class; event times drift forward with
/// jitter so that some records arrive late against lagging watermarks.
pub fn scenario<R: Rng>(rng: &mut R, joined: bool, records: usize, segments: usize) -> Scenario {
    let step = if joined { DAY / 4 } else { 1_000 };
    let jitter = if joined { 3 * DAY } else { 8_000 };
    let base = 1_577_836_800_000; // 2020-01-01
    let ids = (records as i64 / 8).max(2);
    let n_inputs = if joined { 2 } else { 1 };
    let mut inputs: Vec<Vec<Record>> = vec![Vec::new(); n_inputs];
    for (i, input) in inputs.iter_mut().enumerate() {
        let count = if joined { records / 2 } else { records };
        for o in 0..count {
            let t = base + o as i64 * step + rng.gen_range(-jitter..=jitter) + if i == 1 { 2 * DAY } else { 0 };
            input.push(match (joined, i) {
                (false, _) => kv_record(rng, o as u64, t),
                (true, 0) => order(rng, o as u64, t, ids),
                (true, _) => shipment(rng, o as u64, t, ids),
            });
        }
    }
    let mut segs = Vec::new();
    let mut last_wm: Vec<Option<Timestamp>> = vec![None; n_inputs];
    for s in 0..segments {
        let final_seg = s + 1 == segments;
        let ends: Vec<usize> = inputs
            .iter()
            .map(|r| if final_seg { r.len() } else { r.len() * (s + 1) / segments })
            .collect();
        let wms: Vec<Option<Timestamp>> = (0..n_inputs)
            .map(|i| {
                if final_seg {
                    return Some(Timestamp::MAX);
                }
                if ends[i] == 0 || rng.gen_bool(0.1) {
                    return last_wm[i];
                }
                let seen_max = inputs[i][..ends[i]].iter().map(|r| r.event_time.millis()).max().unwrap();
                let proposal = ts(seen_max - rng.gen_range(0..=2 * jitter));
                Some(last_wm[i].map_or(proposal, |w| w.max(proposal)))
            })
            .collect();
        last_wm.clone_from(&wms);
        segs.push((ends, wms));
    }
    Scenario { inputs, segments: segs }
}
