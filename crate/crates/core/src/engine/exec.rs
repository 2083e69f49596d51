use std::collections::HashMap;

use super::eval::{cmp_values, eval, is_true, window_start, EvalError};
use super::state::{group_key, Buffered, EngineState, Partial, WindowState};
use super::EngineError;
use crate::canonical::Value;
use crate::dsl::{AggFunc, AggSpec, JoinKind, Operator, Typed, TypedPlan};
use crate::par::{self, Parallelism};
use crate::slices::Record;
use crate::time::Timestamp;

/// New records and the new (absolute) watermark of one input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputBatch {
    pub records: Vec<Record>,
    pub watermark: Option<Timestamp>,
}

#[derive(Clone, Debug)]
pub struct TransformRequest<'a> {
    pub plan: &'a TypedPlan,
    /// One batch per plan input, in scan order.
    pub inputs: Vec<InputBatch>,
    pub prior: Option<EngineState>,
    /// Record which input records each output derives from.
    pub tracking: bool,
    pub parallelism: Parallelism,
}

/// An output record; offsets and system time are assigned by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputRow {
    pub event_time: Timestamp,
    pub payload: Vec<Value>,
    /// `(input index, offset)` pairs; empty unless tracking.
    pub sources: Vec<(usize, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformResponse {
    pub outputs: Vec<OutputRow>,
    pub checkpoint: EngineState,
    pub output_watermark: Option<Timestamp>,
    pub late_records_ignored: u64,
}

/// Output event-time bound implied by the input watermarks.
pub fn advance_watermark(plan: &TypedPlan, inputs: &[Option<Timestamp>]) -> Option<Timestamp> {
    let mut lowest = None;
    for w in inputs {
        let w = (*w)?;
        lowest = Some(lowest.map_or(w, |l: Timestamp| l.min(w)));
    }
    match plan.operator {
        Operator::Stateless => lowest,
        Operator::Windowed { window_ms, .. } => {
            let w = lowest?;
            if w == Timestamp::MAX {
                return Some(w);
            }
            Some(Timestamp::saturating_from_millis(window_start(w, window_ms)))
        }
        Operator::Joined { upper_bound_ms, .. } => {
            let (l, r) = (inputs[0]?, inputs[1]?);
            let right_bound = if r == Timestamp::MAX { r } else { r.saturating_add_ms(-upper_bound_ms) };
            Some(l.min(right_bound))
        }
    }
}

fn input_row(r: &Record) -> Vec<Value> {
    let mut row = Vec::with_capacity(r.payload.len() + 1);
    row.push(Value::Timestamp(r.event_time));
    row.extend(r.payload.iter().cloned());
    row
}

fn project(plan: &TypedPlan, row: &[Value]) -> Result<Vec<Value>, EvalError> {
    plan.outputs.iter().map(|o| eval(o, row)).collect()
}

fn passes(filter: &Option<Typed>, row: &[Value]) -> Result<bool, EvalError> {
    match filter {
        None => Ok(true),
        Some(f) => Ok(is_true(&eval(f, row)?)),
    }
}

fn is_late(t: Timestamp, watermark: Option<Timestamp>) -> bool {
    watermark.is_some_and(|w| t < w)
}

/// Pure function of the request: no clock, randomness or storage access.
pub fn execute(req: TransformRequest<'_>) -> Result<TransformResponse, EngineError> {
    let plan = req.plan;
    if req.inputs.len() != plan.inputs.len() {
        return Err(EngineError::SchemaMismatch {
            input: req.inputs.len(),
            offset: None,
            message: format!("plan has {} inputs, request {}", plan.inputs.len(), req.inputs.len()),
        });
    }
    let mut state = req.prior.unwrap_or_else(|| EngineState::initial(plan));
    if state.input_watermarks.len() != plan.inputs.len() {
        return Err(EngineError::MalformedCheckpoint("watermark count does not match plan".into()));
    }
    for (i, (batch, input)) in req.inputs.iter().zip(&plan.inputs).enumerate() {
        let prev = state.input_watermarks[i];
        if prev.is_some() && batch.watermark.is_none_or(|w| Some(w) < prev) {
            return Err(EngineError::WatermarkRegression { input: i, previous: prev, proposed: batch.watermark });
        }
        par::try_map(req.parallelism, &batch.records, |r| input.schema.check_payload(&r.payload)).map_err(|m| {
            let bad = batch.records.iter().find(|r| input.schema.check_payload(&r.payload).is_err());
            EngineError::SchemaMismatch { input: i, offset: bad.map(|r| r.offset), message: m }
        })?;
    }

    let prior_wms = state.input_watermarks.clone();
    let new_wms: Vec<Option<Timestamp>> = req.inputs.iter().map(|b| b.watermark).collect();
    let mut run = Run { plan, tracking: req.tracking, outputs: Vec::new(), late: 0 };

    match &plan.operator {
        Operator::Stateless => run.stateless(&req.inputs[0].records, req.parallelism)?,
        Operator::Windowed { window_ms, group_by, aggregates } => {
            run.windowed(&mut state, &req.inputs[0].records, prior_wms[0], new_wms[0], *window_ms, group_by, aggregates)?
        }
        Operator::Joined { kind, keys, upper_bound_ms } => {
            let join = Join { kind: *kind, keys, upper_bound_ms: *upper_bound_ms };
            run.joined(&mut state, &join, &req.inputs, &prior_wms, &new_wms)?
        }
    }

    state.input_watermarks = new_wms;
    state.late_ignored_total += run.late;
    Ok(TransformResponse {
        outputs: run.outputs,
        output_watermark: advance_watermark(plan, &state.input_watermarks),
        checkpoint: state,
        late_records_ignored: run.late,
    })
}

struct Run<'a> {
    plan: &'a TypedPlan,
    tracking: bool,
    outputs: Vec<OutputRow>,
    late: u64,
}

struct Join<'a> {
    kind: JoinKind,
    keys: &'a [(Typed, Typed)],
    upper_bound_ms: i64,
}

impl Join<'_> {
    /// Right watermark `w` guarantees every match of a left record at `t` has arrived.
    fn ready(&self, t: Timestamp, w: Option<Timestamp>) -> bool {
        match w {
            None => false,
            Some(w) if w == Timestamp::MAX => true,
            Some(w) => (t.millis() as i128 + self.upper_bound_ms as i128) < w.millis() as i128,
        }
    }

    /// Canonical key string, or `None` if any key part is null (never matches).
    fn key(&self, row: &[Value], left: bool) -> Result<Option<String>, EvalError> {
        let mut parts = Vec::with_capacity(self.keys.len());
        for (l, r) in self.keys {
            let v = eval(if left { l } else { r }, row)?;
            if v.is_null() {
                return Ok(None);
            }
            parts.push(v);
        }
        Ok(Some(group_key(&parts)))
    }
}

impl Run<'_> {
    fn emit(&mut self, event_time: Timestamp, row: &[Value], sources: Vec<(usize, u64)>) -> Result<(), EvalError> {
        if !passes(&self.plan.filter, row)? {
            return Ok(());
        }
        let payload = project(self.plan, row)?;
        self.outputs.push(OutputRow { event_time, payload, sources: if self.tracking { sources } else { Vec::new() } });
        Ok(())
    }

    fn stateless(&mut self, records: &[Record], mode: Parallelism) -> Result<(), EngineError> {
        let plan = self.plan;
        let tracking = self.tracking;
        let rows = par::try_map(mode, records, |r| -> Result<Option<OutputRow>, EvalError> {
            let row = input_row(r);
            if !passes(&plan.filter, &row)? {
                return Ok(None);
            }
            Ok(Some(OutputRow {
                event_time: r.event_time,
                payload: project(plan, &row)?,
                sources: if tracking { vec![(0, r.offset)] } else { Vec::new() },
            }))
        })?;
        self.outputs.extend(rows.into_iter().flatten());
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn windowed(
        &mut self,
        state: &mut EngineState,
        records: &[Record],
        prior: Option<Timestamp>,
        new: Option<Timestamp>,
        window_ms: i64,
        group_by: &[usize],
        aggregates: &[AggSpec],
    ) -> Result<(), EngineError> {
        for r in records {
            if is_late(r.event_time, prior) {
                self.late += 1;
                continue;
            }
            let row = input_row(r);
            if !passes(&self.plan.filter, &row)? {
                continue;
            }
            let group: Vec<Value> = group_by.iter().map(|s| row[*s].clone()).collect();
            let start = window_start(r.event_time, window_ms);
            let window = state.windows.entry((start, group_key(&group))).or_insert_with(|| WindowState {
                group,
                partials: aggregates.iter().map(Partial::empty).collect(),
                contributors: Vec::new(),
            });
            for (spec, partial) in aggregates.iter().zip(window.partials.iter_mut()) {
                accumulate(spec, partial, &row)?;
            }
            if self.tracking {
                window.contributors.push((0, r.offset));
            }
        }

        let Some(w) = new else { return Ok(()) };
        let closed: Vec<(i64, String)> = state
            .windows
            .keys()
            .take_while(|(start, _)| w == Timestamp::MAX || start + window_ms <= w.millis())
            .cloned()
            .collect();
        for key in closed {
            let win = state.windows.remove(&key).expect("listed key");
            let start = Timestamp::from_millis(key.0).map_err(|_| EvalError::Overflow("window start".into()))?;
            let mut row = Vec::with_capacity(1 + win.group.len() + win.partials.len());
            row.push(Value::Timestamp(start));
            row.extend(win.group);
            row.extend(win.partials.iter().map(Partial::finish));
            let payload = project(self.plan, &row)?;
            let sources = if self.tracking { win.contributors } else { Vec::new() };
            self.outputs.push(OutputRow { event_time: start, payload, sources });
        }
        Ok(())
    }

    fn joined(
        &mut self,
        state: &mut EngineState,
        join: &Join<'_>,
        inputs: &[InputBatch],
        prior: &[Option<Timestamp>],
        new: &[Option<Timestamp>],
    ) -> Result<(), EngineError> {
        let first_new_left = state.left_buffer.len();
        for r in &inputs[0].records {
            if is_late(r.event_time, prior[0]) {
                self.late += 1;
            } else {
                state.left_buffer.push(Buffered { offset: r.offset, event_time: r.event_time, payload: r.payload.clone() });
            }
        }
        for r in &inputs[1].records {
            if is_late(r.event_time, prior[1]) {
                self.late += 1;
            } else {
                state.right_buffer.push(Buffered { offset: r.offset, event_time: r.event_time, payload: r.payload.clone() });
            }
        }

        // Right-side index by key, in right offset order.
        let right_width = 1 + self.plan.inputs[1].schema.len();
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, b) in state.right_buffer.iter().enumerate() {
            if let Some(k) = join.key(&b.row(), false)? {
                index.entry(k).or_default().push(i);
            }
        }

        // Left records that were already resolvable on arrival go first, in arrival order.
        let mut resolved = vec![false; state.left_buffer.len()];
        for i in first_new_left..state.left_buffer.len() {
            if join.ready(state.left_buffer[i].event_time, prior[1]) {
                self.resolve(state, join, &index, right_width, i)?;
                resolved[i] = true;
            }
        }
        for i in 0..state.left_buffer.len() {
            if !resolved[i] && join.ready(state.left_buffer[i].event_time, new[1]) {
                self.resolve(state, join, &index, right_width, i)?;
                resolved[i] = true;
            }
        }
        let mut it = resolved.iter();
        state.left_buffer.retain(|_| !*it.next().expect("same length"));

        // Right records no current or future left record can match.
        if let Some(wl) = new[0] {
            let floor = state.left_buffer.iter().map(|b| b.event_time).min().map_or(wl, |m| m.min(wl));
            state.right_buffer.retain(|b| b.event_time >= floor);
        }
        Ok(())
    }

    fn resolve(
        &mut self,
        state: &EngineState,
        join: &Join<'_>,
        index: &HashMap<String, Vec<usize>>,
        right_width: usize,
        i: usize,
    ) -> Result<(), EngineError> {
        let left = &state.left_buffer[i];
        let left_row = left.row();
        let lo = left.event_time;
        let hi = left.event_time.millis() as i128 + join.upper_bound_ms as i128;
        let mut matched = false;
        if let Some(key) = join.key(&left_row, true)? {
            for &j in index.get(&key).map(Vec::as_slice).unwrap_or(&[]) {
                let right = &state.right_buffer[j];
                if right.event_time < lo || right.event_time.millis() as i128 > hi {
                    continue;
                }
                matched = true;
                let mut row = left_row.clone();
                row.extend(right.row());
                self.emit(left.event_time, &row, vec![(0, left.offset), (1, right.offset)])?;
            }
        }
        if !matched && join.kind == JoinKind::Left {
            let mut row = left_row;
            row.extend(std::iter::repeat_n(Value::Null, right_width));
            self.emit(left.event_time, &row, vec![(0, left.offset)])?;
        }
        Ok(())
    }
}

fn accumulate(spec: &AggSpec, partial: &mut Partial, row: &[Value]) -> Result<(), EvalError> {
    let v = match &spec.arg {
        None => Value::Bool(true),
        Some(a) => eval(a, row)?,
    };
    if v.is_null() {
        return Ok(());
    }
    let overflow = || EvalError::Overflow(spec.func.name().to_string());
    match (partial, &v) {
        (Partial::Count(n), _) => *n = n.checked_add(1).ok_or_else(overflow)?,
        (Partial::SumInt(s), Value::Int(x)) => {
            *s = Some(s.unwrap_or(0).checked_add(*x).ok_or_else(overflow)?);
        }
        (Partial::SumFloat(s), Value::Float(x)) => {
            let sum = s.unwrap_or(0.0) + x;
            if !sum.is_finite() {
                return Err(EvalError::NonFinite("SUM".into()));
            }
            *s = Some(sum);
        }
        (Partial::Extreme(cur), v) => {
            let replace = cur.is_null()
                || match cmp_values(v, cur) {
                    Some(std::cmp::Ordering::Less) => spec.func == AggFunc::Min,
                    Some(std::cmp::Ordering::Greater) => spec.func == AggFunc::Max,
                    _ => false,
                };
            if replace {
                *cur = v.clone();
            }
        }
        (Partial::AvgInt { sum, count }, Value::Int(x)) => {
            *sum = sum.checked_add(*x).ok_or_else(overflow)?;
            *count += 1;
        }
        (Partial::AvgFloat { sum, count }, Value::Float(x)) => {
            *sum += x;
            if !sum.is_finite() {
                return Err(EvalError::NonFinite("AVG".into()));
            }
            *count += 1;
        }
        _ => unreachable!("aggregate input type checked during analysis"),
    }
    Ok(())
}
