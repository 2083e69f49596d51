use std::cmp::Ordering;

use crate::canonical::Value;
use crate::dsl::{BinOp, TExpr, Typed};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("arithmetic overflow in {0}")]
    Overflow(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite result in {0}")]
    NonFinite(String),
}

/// Evaluates a typed expression over one row. SQL three-valued logic:
/// null operands yield null, except in `AND`/`OR` and `IS NULL`.
pub fn eval(t: &Typed, row: &[Value]) -> Result<Value, EvalError> {
    Ok(match &t.expr {
        TExpr::Slot(s) => row[*s].clone(),
        TExpr::Const(v) => v.clone(),
        TExpr::ToFloat(e) => match eval(e, row)? {
            Value::Int(i) => Value::Float(i as f64),
            other => other,
        },
        TExpr::Not(e) => match eval(e, row)? {
            Value::Bool(b) => Value::Bool(!b),
            _ => Value::Null,
        },
        TExpr::Neg(e) => match eval(e, row)? {
            Value::Int(i) => Value::Int(i.checked_neg().ok_or_else(|| EvalError::Overflow("negation".into()))?),
            Value::Float(x) => Value::Float(-x),
            _ => Value::Null,
        },
        TExpr::IsNull { expr, negated } => Value::Bool(eval(expr, row)?.is_null() != *negated),
        TExpr::Between { expr, low, high } => {
            let x = eval(expr, row)?;
            let lo = compare(BinOp::GtEq, &x, &eval(low, row)?);
            let hi = compare(BinOp::LtEq, &x, &eval(high, row)?);
            and(lo, hi)
        }
        TExpr::Binary { op, left, right } => {
            let l = eval(left, row)?;
            match op {
                // Both sides are evaluated: errors must not depend on short-circuiting.
                BinOp::And => and(l, eval(right, row)?),
                BinOp::Or => or(l, eval(right, row)?),
                op if op.is_comparison() => compare(*op, &l, &eval(right, row)?),
                op => arithmetic(*op, l, eval(right, row)?)?,
            }
        }
    })
}

/// Whether a predicate value admits the row.
pub fn is_true(v: &Value) -> bool {
    matches!(v, Value::Bool(true))
}

fn and(l: Value, r: Value) -> Value {
    match (l, r) {
        (Value::Bool(false), _) | (_, Value::Bool(false)) => Value::Bool(false),
        (Value::Bool(true), Value::Bool(true)) => Value::Bool(true),
        _ => Value::Null,
    }
}

fn or(l: Value, r: Value) -> Value {
    match (l, r) {
        (Value::Bool(true), _) | (_, Value::Bool(true)) => Value::Bool(true),
        (Value::Bool(false), Value::Bool(false)) => Value::Bool(false),
        _ => Value::Null,
    }
}

/// Total order over same-typed non-null scalars.
pub fn cmp_values(l: &Value, r: &Value) -> Option<Ordering> {
    match (l, r) {
        (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
        (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
        (Value::String(a), Value::String(b)) => Some(a.cmp(b)),
        (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
        (Value::Timestamp(a), Value::Timestamp(b)) => Some(a.cmp(b)),
        _ => None,
    }
}

fn compare(op: BinOp, l: &Value, r: &Value) -> Value {
    let Some(ord) = cmp_values(l, r) else { return Value::Null };
    Value::Bool(match op {
        BinOp::Eq => ord == Ordering::Equal,
        BinOp::NotEq => ord != Ordering::Equal,
        BinOp::Lt => ord == Ordering::Less,
        BinOp::LtEq => ord != Ordering::Greater,
        BinOp::Gt => ord == Ordering::Greater,
        BinOp::GtEq => ord != Ordering::Less,
        _ => unreachable!("not a comparison"),
    })
}

fn arithmetic(op: BinOp, l: Value, r: Value) -> Result<Value, EvalError> {
    let overflow = || EvalError::Overflow(op.symbol().to_string());
    Ok(match (l, r) {
        (Value::Int(a), Value::Int(b)) => Value::Int(match op {
            BinOp::Add => a.checked_add(b).ok_or_else(overflow)?,
            BinOp::Sub => a.checked_sub(b).ok_or_else(overflow)?,
            BinOp::Mul => a.checked_mul(b).ok_or_else(overflow)?,
            BinOp::Div if b == 0 => return Err(EvalError::DivisionByZero),
            BinOp::Div => a.checked_div(b).ok_or_else(overflow)?,
            _ => unreachable!("not arithmetic"),
        }),
        (Value::Float(a), Value::Float(b)) => {
            let x = match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div if b == 0.0 => return Err(EvalError::DivisionByZero),
                BinOp::Div => a / b,
                _ => unreachable!("not arithmetic"),
            };
            if !x.is_finite() {
                return Err(EvalError::NonFinite(op.symbol().to_string()));
            }
            Value::Float(x)
        }
        // Timestamp +/- interval (milliseconds).
        (Value::Timestamp(t), Value::Int(ms)) => {
            let delta = if op == BinOp::Sub { ms.checked_neg().ok_or_else(overflow)? } else { ms };
            Value::Timestamp(t.checked_add_ms(delta).ok_or_else(overflow)?)
        }
        _ => Value::Null,
    })
}

/// Window start `floor(t / w) * w`.
pub fn window_start(t: Timestamp, window_ms: i64) -> i64 {
    t.millis().div_euclid(window_ms) * window_ms
}
