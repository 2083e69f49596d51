//! Name resolution and type checking. Produces a [`TypedPlan`] whose
//! expressions address columns by slot in a flat row.
//!
//! Row layouts:
//! - per input: `[event_time, payload...]`
//! - joined: left input row followed by right input row
//! - after aggregation: `[window_start, group values..., aggregate results...]`

use std::collections::BTreeMap;

use super::ast::*;
use crate::canonical::Value;
use crate::schema::{Column, ColumnType, SchemaDef, RESERVED_COLUMNS};

/// Pseudo-column available on every input, holding the record's event time.
pub const EVENT_TIME: &str = "event_time";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AnalyzeError {
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("column {0} is ambiguous")]
    AmbiguousColumn(String),
    #[error("type error: {0}")]
    TypeError(String),
    #[error("unknown input {0}")]
    UnknownInputAlias(String),
}

fn type_err<T>(msg: impl Into<String>) -> Result<T, AnalyzeError> {
    Err(AnalyzeError::TypeError(msg.into()))
}

/// What analysis needs to know about one input dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct InputDef {
    pub schema: SchemaDef,
    /// Payload column mirroring the record event time, if any.
    pub event_time_column: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ty {
    Col(ColumnType),
    Interval,
    Null,
}

impl Ty {
    fn describe(self) -> &'static str {
        match self {
            Ty::Col(t) => t.name(),
            Ty::Interval => "interval",
            Ty::Null => "null",
        }
    }

    fn is_numeric(self) -> bool {
        matches!(self, Ty::Col(ColumnType::Int64 | ColumnType::Float64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TExpr {
    Slot(usize),
    /// Intervals are carried as `Value::Int` milliseconds.
    Const(Value),
    ToFloat(Box<Typed>),
    Binary { op: BinOp, left: Box<Typed>, right: Box<Typed> },
    Not(Box<Typed>),
    Neg(Box<Typed>),
    IsNull { expr: Box<Typed>, negated: bool },
    Between { expr: Box<Typed>, low: Box<Typed>, high: Box<Typed> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Typed {
    pub expr: TExpr,
    pub ty: Ty,
    pub nullable: bool,
}

impl Typed {
    fn new(expr: TExpr, ty: Ty, nullable: bool) -> Self {
        Typed { expr, ty, nullable }
    }

    fn to_float(self) -> Typed {
        if self.ty == Ty::Col(ColumnType::Int64) {
            let nullable = self.nullable;
            Typed::new(TExpr::ToFloat(Box::new(self)), Ty::Col(ColumnType::Float64), nullable)
        } else {
            self
        }
    }

    fn visit_slots(&self, f: &mut impl FnMut(usize)) {
        match &self.expr {
            TExpr::Slot(s) => f(*s),
            TExpr::Const(_) => {}
            TExpr::ToFloat(e) | TExpr::Not(e) | TExpr::Neg(e) | TExpr::IsNull { expr: e, .. } => e.visit_slots(f),
            TExpr::Binary { left, right, .. } => {
                left.visit_slots(f);
                right.visit_slots(f);
            }
            TExpr::Between { expr, low, high } => {
                expr.visit_slots(f);
                low.visit_slots(f);
                high.visit_slots(f);
            }
        }
    }

    fn map_slots(&mut self, f: &impl Fn(usize) -> usize) {
        match &mut self.expr {
            TExpr::Slot(s) => *s = f(*s),
            TExpr::Const(_) => {}
            TExpr::ToFloat(e) | TExpr::Not(e) | TExpr::Neg(e) | TExpr::IsNull { expr: e, .. } => e.map_slots(f),
            TExpr::Binary { left, right, .. } => {
                left.map_slots(f);
                right.map_slots(f);
            }
            TExpr::Between { expr, low, high } => {
                expr.map_slots(f);
                low.map_slots(f);
                high.map_slots(f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggSpec {
    pub func: AggFunc,
    /// Typed over the input row; `None` for `COUNT(*)`.
    pub arg: Option<Typed>,
    pub result: ColumnType,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Stateless,
    Windowed {
        window_ms: i64,
        /// Input-row slots of the grouping columns.
        group_by: Vec<usize>,
        aggregates: Vec<AggSpec>,
    },
    Joined {
        kind: JoinKind,
        /// `(left key over left row, right key over right row)`.
        keys: Vec<(Typed, Typed)>,
        upper_bound_ms: i64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlanClass {
    Stateless,
    Windowed,
    Joined,
}

impl PlanClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanClass::Stateless => "stateless",
            PlanClass::Windowed => "windowed",
            PlanClass::Joined => "joined",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypedInput {
    pub table: String,
    pub alias: String,
    pub schema: SchemaDef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypedPlan {
    pub plan: LogicalPlan,
    /// One entry per scan, left to right.
    pub inputs: Vec<TypedInput>,
    pub operator: Operator,
    /// Applied before aggregation, or after the join.
    pub filter: Option<Typed>,
    pub outputs: Vec<Typed>,
    pub output_schema: SchemaDef,
    pub event_time_column: Option<String>,
}

impl TypedPlan {
    pub fn class(&self) -> PlanClass {
        match self.operator {
            Operator::Stateless => PlanClass::Stateless,
            Operator::Windowed { .. } => PlanClass::Windowed,
            Operator::Joined { .. } => PlanClass::Joined,
        }
    }

    /// How far behind its inputs the output watermark trails.
    pub fn temporal_reach(&self) -> i64 {
        match self.operator {
            Operator::Stateless => 0,
            Operator::Windowed { window_ms, .. } => window_ms,
            Operator::Joined { upper_bound_ms, .. } => upper_bound_ms,
        }
    }
}

pub fn classify(plan: &TypedPlan) -> PlanClass {
    plan.class()
}

pub fn temporal_reach(plan: &TypedPlan) -> i64 {
    plan.temporal_reach()
}

#[derive(Clone, Debug)]
struct ScopeCol {
    qualifier: String,
    name: String,
    slot: usize,
    ty: ColumnType,
    nullable: bool,
    is_event_time: bool,
}

#[derive(Default)]
struct Scope {
    cols: Vec<ScopeCol>,
    aliases: Vec<String>,
}

impl Scope {
    fn add_input(&mut self, alias: &str, def: &InputDef, nullable: bool) {
        let base = self.cols.len();
        self.aliases.push(alias.to_string());
        self.cols.push(ScopeCol {
            qualifier: alias.to_string(),
            name: EVENT_TIME.to_string(),
            slot: base,
            ty: ColumnType::Timestamp,
            nullable,
            is_event_time: true,
        });
        for (i, c) in def.schema.columns.iter().enumerate() {
            self.cols.push(ScopeCol {
                qualifier: alias.to_string(),
                name: c.name.clone(),
                slot: base + 1 + i,
                ty: c.ty,
                nullable: c.nullable || nullable,
                is_event_time: def.event_time_column.as_deref() == Some(c.name.as_str()),
            });
        }
    }

    fn resolve(&self, qualifier: Option<&str>, name: &str) -> Result<&ScopeCol, AnalyzeError> {
        let display = match qualifier {
            Some(q) => format!("{q}.{name}"),
            None => name.to_string(),
        };
        if let Some(q) = qualifier {
            if !self.aliases.iter().any(|a| a == q) {
                return Err(AnalyzeError::UnknownInputAlias(q.to_string()));
            }
        }
        let mut hits = self
            .cols
            .iter()
            .filter(|c| c.name == name && qualifier.is_none_or(|q| c.qualifier == q));
        match (hits.next(), hits.next()) {
            (None, _) => Err(AnalyzeError::UnknownColumn(display)),
            (Some(c), None) => Ok(c),
            (Some(_), Some(_)) => Err(AnalyzeError::AmbiguousColumn(display)),
        }
    }
}

/// How aggregate expressions are handled while typing.
enum AggMode<'a> {
    Forbidden(&'static str),
    /// Post-aggregation select item: aggregates and group columns become slots.
    Collect { input: &'a Scope, group_by: &'a [usize], aggregates: &'a mut Vec<AggSpec> },
}

fn type_expr(e: &Expr, scope: &Scope, mode: &mut AggMode<'_>) -> Result<Typed, AnalyzeError> {
    match e {
        Expr::Column { qualifier, name } => match mode {
            AggMode::Forbidden(_) => {
                let c = scope.resolve(qualifier.as_deref(), name)?;
                Ok(Typed::new(TExpr::Slot(c.slot), Ty::Col(c.ty), c.nullable))
            }
            AggMode::Collect { input, group_by, .. } => {
                let c = input.resolve(qualifier.as_deref(), name)?;
                if let Some(i) = group_by.iter().position(|s| *s == c.slot) {
                    Ok(Typed::new(TExpr::Slot(1 + i), Ty::Col(c.ty), c.nullable))
                } else if c.is_event_time {
                    Ok(Typed::new(TExpr::Slot(0), Ty::Col(ColumnType::Timestamp), false))
                } else {
                    type_err(format!("column {name} must appear in GROUP BY or inside an aggregate"))
                }
            }
        },
        Expr::Literal(l) => Ok(match l {
            Literal::Null => return type_err("NULL is only allowed in IS [NOT] NULL"),
            Literal::Bool(b) => Typed::new(TExpr::Const(Value::Bool(*b)), Ty::Col(ColumnType::Bool), false),
            Literal::Int(i) => Typed::new(TExpr::Const(Value::Int(*i)), Ty::Col(ColumnType::Int64), false),
            Literal::Float(x) => Typed::new(TExpr::Const(Value::Float(*x)), Ty::Col(ColumnType::Float64), false),
            Literal::String(s) => Typed::new(TExpr::Const(Value::str(s)), Ty::Col(ColumnType::String), false),
            Literal::Timestamp(t) => {
                Typed::new(TExpr::Const(Value::Timestamp(*t)), Ty::Col(ColumnType::Timestamp), false)
            }
            Literal::Interval(iv) => {
                let ms = iv.millis().ok_or_else(|| AnalyzeError::TypeError("interval overflows".into()))?;
                Typed::new(TExpr::Const(Value::Int(ms)), Ty::Interval, false)
            }
        }),
        Expr::IsNull { expr, negated } => {
            let inner = match expr.as_ref() {
                Expr::Literal(Literal::Null) => Typed::new(TExpr::Const(Value::Null), Ty::Null, true),
                other => type_expr(other, scope, mode)?,
            };
            Ok(Typed::new(
                TExpr::IsNull { expr: Box::new(inner), negated: *negated },
                Ty::Col(ColumnType::Bool),
                false,
            ))
        }
        Expr::Not(inner) => {
            let t = type_expr(inner, scope, mode)?;
            if t.ty != Ty::Col(ColumnType::Bool) {
                return type_err(format!("NOT expects bool, found {}", t.ty.describe()));
            }
            let n = t.nullable;
            Ok(Typed::new(TExpr::Not(Box::new(t)), Ty::Col(ColumnType::Bool), n))
        }
        Expr::Neg(inner) => {
            let t = type_expr(inner, scope, mode)?;
            if !t.ty.is_numeric() {
                return type_err(format!("cannot negate {}", t.ty.describe()));
            }
            let (ty, n) = (t.ty, t.nullable);
            Ok(Typed::new(TExpr::Neg(Box::new(t)), ty, n))
        }
        Expr::Between { expr, low, high } => {
            let (x, lo) = comparable(type_expr(expr, scope, mode)?, type_expr(low, scope, mode)?)?;
            let (x, hi) = comparable(x, type_expr(high, scope, mode)?)?;
            let lo = if x.ty != lo.ty { lo.to_float() } else { lo };
            let n = x.nullable || lo.nullable || hi.nullable;
            Ok(Typed::new(
                TExpr::Between { expr: Box::new(x), low: Box::new(lo), high: Box::new(hi) },
                Ty::Col(ColumnType::Bool),
                n,
            ))
        }
        Expr::Binary { op, left, right } => {
            if matches!(**left, Expr::Literal(Literal::Null)) || matches!(**right, Expr::Literal(Literal::Null)) {
                return type_err(format!("comparison with NULL using {}; use IS NULL", op.symbol()));
            }
            let l = type_expr(left, scope, mode)?;
            let r = type_expr(right, scope, mode)?;
            binary(*op, l, r)
        }
        Expr::Aggregate { func, arg } => match mode {
            AggMode::Forbidden(ctx) => type_err(format!("aggregate {} not allowed in {ctx}", func.name())),
            AggMode::Collect { input, aggregates, .. } => {
                let arg = match arg {
                    None => None,
                    Some(a) => {
                        let t = type_expr(a, input, &mut AggMode::Forbidden("aggregate arguments"))?;
                        match t.ty {
                            Ty::Col(_) => Some(t),
                            other => return type_err(format!("cannot aggregate {}", other.describe())),
                        }
                    }
                };
                let arg_ty = arg.as_ref().map(|a| match a.ty {
                    Ty::Col(c) => c,
                    _ => unreachable!(),
                });
                let result = match (func, arg_ty) {
                    (AggFunc::Count, _) => ColumnType::Int64,
                    (AggFunc::Sum, Some(t @ (ColumnType::Int64 | ColumnType::Float64))) => t,
                    (AggFunc::Avg, Some(ColumnType::Int64 | ColumnType::Float64)) => ColumnType::Float64,
                    (AggFunc::Min | AggFunc::Max, Some(t)) => t,
                    (f, Some(t)) => return type_err(format!("{} over {t}", f.name())),
                    (f, None) => return type_err(format!("{}(*) is not supported", f.name())),
                };
                let nullable = *func != AggFunc::Count && arg.as_ref().is_some_and(|a| a.nullable);
                let spec = AggSpec { func: *func, arg, result };
                let index = match aggregates.iter().position(|s| *s == spec) {
                    Some(i) => i,
                    None => {
                        aggregates.push(spec);
                        aggregates.len() - 1
                    }
                };
                // Slot is fixed up once the group count is known.
                Ok(Typed::new(TExpr::Slot(usize::MAX - index), Ty::Col(result), nullable))
            }
        },
    }
}

/// Unifies two operands for comparison, coercing int to float if needed.
fn comparable(l: Typed, r: Typed) -> Result<(Typed, Typed), AnalyzeError> {
    match (l.ty, r.ty) {
        (a, b) if a == b && matches!(a, Ty::Col(_)) => Ok((l, r)),
        (a, b) if a.is_numeric() && b.is_numeric() => Ok((l.to_float(), r.to_float())),
        (a, b) => type_err(format!("cannot compare {} with {}", a.describe(), b.describe())),
    }
}

fn binary(op: BinOp, l: Typed, r: Typed) -> Result<Typed, AnalyzeError> {
    use ColumnType::*;
    let nullable = l.nullable || r.nullable;
    if op.is_comparison() {
        let (l, r) = comparable(l, r)?;
        return Ok(Typed::new(TExpr::Binary { op, left: Box::new(l), right: Box::new(r) }, Ty::Col(Bool), nullable));
    }
    if matches!(op, BinOp::And | BinOp::Or) {
        if l.ty != Ty::Col(Bool) || r.ty != Ty::Col(Bool) {
            return type_err(format!("{} expects bool operands, found {} and {}", op.symbol(), l.ty.describe(), r.ty.describe()));
        }
        return Ok(Typed::new(TExpr::Binary { op, left: Box::new(l), right: Box::new(r) }, Ty::Col(Bool), nullable));
    }
    let (l, r, ty) = match (op, l.ty, r.ty) {
        (_, Ty::Col(Int64), Ty::Col(Int64)) => (l, r, Ty::Col(Int64)),
        (_, a, b) if a.is_numeric() && b.is_numeric() => (l.to_float(), r.to_float(), Ty::Col(Float64)),
        (BinOp::Add | BinOp::Sub, Ty::Col(Timestamp), Ty::Interval) => (l, r, Ty::Col(Timestamp)),
        (BinOp::Add, Ty::Interval, Ty::Col(Timestamp)) => (r, l, Ty::Col(Timestamp)),
        (_, a, b) => {
            return type_err(format!("cannot apply {} to {} and {}", op.symbol(), a.describe(), b.describe()))
        }
    };
    Ok(Typed::new(TExpr::Binary { op, left: Box::new(l), right: Box::new(r) }, ty, nullable))
}

struct Shape<'a> {
    scans: Vec<(&'a str, &'a str)>,
    join: Option<(&'a JoinKind, &'a [(Expr, Expr)], &'a Expr, &'a Expr, &'a Interval)>,
    filter: Option<&'a Expr>,
    tumble: Option<(&'a Expr, &'a Interval, &'a [Expr])>,
    items: &'a [SelectItem],
}

fn shape(plan: &LogicalPlan) -> Result<Shape<'_>, AnalyzeError> {
    let LogicalPlan::Project { input, items } = plan else {
        return type_err("plan must end in a projection");
    };
    let mut node = input.as_ref();
    let mut tumble = None;
    let mut filter = None;
    if let LogicalPlan::TumbleAggregate { input, time_column, window, group_by } = node {
        tumble = Some((time_column, window, group_by.as_slice()));
        node = input;
    }
    if let LogicalPlan::Filter { input, predicate } = node {
        filter = Some(predicate);
        node = input;
    }
    let (scans, join) = match node {
        LogicalPlan::Scan { table, alias } => (vec![(table.as_str(), alias.as_str())], None),
        LogicalPlan::IntervalJoin { left, right, kind, keys, left_time, right_time, upper_bound } => {
            match (left.as_ref(), right.as_ref()) {
                (LogicalPlan::Scan { .. }, LogicalPlan::Scan { .. }) => {}
                _ => return type_err("joins must combine two inputs directly"),
            }
            (node.scans(), Some((kind, keys.as_slice(), left_time, right_time, upper_bound)))
        }
        _ => return type_err("unsupported plan shape"),
    };
    if join.is_some() && tumble.is_some() {
        return type_err("a plan may contain a window or a join, not both");
    }
    Ok(Shape { scans, join, filter, tumble, items })
}

/// Resolves names and types of `plan` against `inputs`, keyed by table name.
pub fn analyze(plan: &LogicalPlan, inputs: &BTreeMap<String, InputDef>) -> Result<TypedPlan, AnalyzeError> {
    let shape = shape(plan)?;
    let mut defs = Vec::new();
    for (table, alias) in &shape.scans {
        let def = inputs.get(*table).ok_or_else(|| AnalyzeError::UnknownInputAlias(table.to_string()))?;
        if let Some(et) = &def.event_time_column {
            if def.schema.column(et).is_none() {
                return Err(AnalyzeError::UnknownColumn(format!("{alias}.{et}")));
            }
        }
        defs.push(def);
    }
    if shape.scans.len() == 2 && shape.scans[0].1 == shape.scans[1].1 {
        return type_err(format!("alias {} used twice", shape.scans[0].1));
    }
    let typed_inputs: Vec<TypedInput> = shape
        .scans
        .iter()
        .zip(&defs)
        .map(|((table, alias), def)| TypedInput {
            table: table.to_string(),
            alias: alias.to_string(),
            schema: def.schema.clone(),
        })
        .collect();

    let mut scope = Scope::default();
    scope.add_input(shape.scans[0].1, defs[0], false);

    let mut outputs = Vec::new();
    let mut names = Vec::new();
    let mut et_output = None;

    let operator = if let Some((kind, keys, left_time, right_time, upper)) = shape.join {
        let left_width = scope.cols.len();
        // Key and bound expressions see both sides with their own nullability.
        let mut plain = Scope::default();
        plain.add_input(shape.scans[0].1, defs[0], false);
        plain.add_input(shape.scans[1].1, defs[1], false);
        scope.add_input(shape.scans[1].1, defs[1], *kind == JoinKind::Left);

        let side_of = |t: &Typed| -> Option<usize> {
            let (mut l, mut r) = (false, false);
            t.visit_slots(&mut |s| if s < left_width { l = true } else { r = true });
            match (l, r) {
                (true, false) => Some(0),
                (false, true) => Some(1),
                _ => None,
            }
        };
        let is_event_time_of = |e: &Expr, side: usize| -> Result<bool, AnalyzeError> {
            let Expr::Column { qualifier, name } = e else { return Ok(false) };
            let c = plain.resolve(qualifier.as_deref(), name)?;
            Ok(c.is_event_time && (c.slot >= left_width) == (side == 1))
        };
        if !is_event_time_of(left_time, 0)? {
            return type_err(format!("join bound {left_time} must be the event time of {}", shape.scans[0].1));
        }
        if !is_event_time_of(right_time, 1)? {
            return type_err(format!("joined time {right_time} must be the event time of {}", shape.scans[1].1));
        }
        let upper_bound_ms = upper.millis().ok_or_else(|| AnalyzeError::TypeError("interval overflows".into()))?;

        let mut typed_keys = Vec::new();
        for (a, b) in keys {
            let ta = type_expr(a, &plain, &mut AggMode::Forbidden("join conditions"))?;
            let tb = type_expr(b, &plain, &mut AggMode::Forbidden("join conditions"))?;
            let (mut lk, mut rk) = match (side_of(&ta), side_of(&tb)) {
                (Some(0), Some(1)) => (ta, tb),
                (Some(1), Some(0)) => (tb, ta),
                _ => return type_err(format!("join key {a} = {b} must compare one column from each input")),
            };
            (lk, rk) = comparable(lk, rk)?;
            rk.map_slots(&|s| s - left_width);
            typed_keys.push((lk, rk));
        }
        Operator::Joined { kind: *kind, keys: typed_keys, upper_bound_ms }
    } else if let Some((time_column, window, group_by)) = shape.tumble {
        let Expr::Column { qualifier, name } = time_column else {
            return type_err("TUMBLE expects a column");
        };
        if !scope.resolve(qualifier.as_deref(), name)?.is_event_time {
            return type_err(format!("TUMBLE column {time_column} must be the event time"));
        }
        let window_ms = window.millis().ok_or_else(|| AnalyzeError::TypeError("interval overflows".into()))?;
        let mut group_slots = Vec::new();
        let mut group_cols = Vec::new();
        for g in group_by {
            let Expr::Column { qualifier, name } = g else {
                return type_err("GROUP BY expects columns");
            };
            let c = scope.resolve(qualifier.as_deref(), name)?;
            if group_slots.contains(&c.slot) {
                return type_err(format!("duplicate grouping column {g}"));
            }
            group_slots.push(c.slot);
            group_cols.push(c.clone());
        }
        let mut aggregates = Vec::new();
        let mut raw = Vec::new();
        for item in shape.items {
            let mut mode = AggMode::Collect { input: &scope, group_by: &group_slots, aggregates: &mut aggregates };
            let t = type_expr(&item.expr, &scope, &mut mode)?;
            raw.push(t);
        }
        let base = 1 + group_slots.len();
        for mut t in raw {
            t.map_slots(&|s| if s > usize::MAX / 2 { base + (usize::MAX - s) } else { s });
            outputs.push(t);
        }
        Operator::Windowed { window_ms, group_by: group_slots, aggregates }
    } else {
        Operator::Stateless
    };

    let filter = match shape.filter {
        Some(p) => {
            let t = type_expr(p, &scope, &mut AggMode::Forbidden("WHERE"))?;
            if t.ty != Ty::Col(ColumnType::Bool) {
                return type_err(format!("WHERE expects bool, found {}", t.ty.describe()));
            }
            Some(t)
        }
        None => None,
    };

    if !matches!(operator, Operator::Windowed { .. }) {
        for item in shape.items {
            outputs.push(type_expr(&item.expr, &scope, &mut AggMode::Forbidden("a plan without GROUP BY"))?);
        }
    }

    let windowed = matches!(operator, Operator::Windowed { .. });
    let mut columns = Vec::new();
    for (item, t) in shape.items.iter().zip(&outputs) {
        let name = match (&item.alias, &item.expr) {
            (Some(a), _) => a.clone(),
            (None, Expr::Column { name, .. }) => name.clone(),
            (None, e) => return type_err(format!("expression {e} needs an alias")),
        };
        if RESERVED_COLUMNS.contains(&name.as_str()) {
            return type_err(format!("output column {name} is reserved; add an alias"));
        }
        if names.contains(&name) {
            return type_err(format!("duplicate output column {name}"));
        }
        let Ty::Col(ty) = t.ty else {
            return type_err(format!("output column {name} has no storable type ({})", t.ty.describe()));
        };
        // The output event time is the window start, or the (left) input's event time.
        let carries_event_time = match t.expr {
            TExpr::Slot(s) if windowed => s == 0,
            TExpr::Slot(s) => scope.cols.iter().any(|c| c.slot == s && c.is_event_time && s < 1 + defs[0].schema.len()),
            _ => false,
        };
        if carries_event_time && et_output.is_none() {
            et_output = Some(name.clone());
        }
        names.push(name.clone());
        columns.push(Column::new(name, ty, t.nullable));
    }
    let output_schema = SchemaDef::new(columns).map_err(|e| AnalyzeError::TypeError(e.to_string()))?;

    Ok(TypedPlan {
        plan: plan.clone(),
        inputs: typed_inputs,
        operator,
        filter,
        outputs,
        output_schema,
        event_time_column: et_output,
    })
}
