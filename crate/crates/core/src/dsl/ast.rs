//! Unanalyzed query plans and their SQL rendering.

use std::fmt;

use crate::time::{Timestamp, MS_PER_DAY, MS_PER_HOUR, MS_PER_MINUTE, MS_PER_SECOND, MS_PER_WEEK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntervalUnit {
    Second,
    Minute,
    Hour,
    Day,
    Week,
}

impl IntervalUnit {
    pub fn millis(self) -> i64 {
        match self {
            IntervalUnit::Second => MS_PER_SECOND,
            IntervalUnit::Minute => MS_PER_MINUTE,
            IntervalUnit::Hour => MS_PER_HOUR,
            IntervalUnit::Day => MS_PER_DAY,
            IntervalUnit::Week => MS_PER_WEEK,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            IntervalUnit::Second => "SECOND",
            IntervalUnit::Minute => "MINUTE",
            IntervalUnit::Hour => "HOUR",
            IntervalUnit::Day => "DAY",
            IntervalUnit::Week => "WEEK",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        let w = word.to_ascii_uppercase();
        Some(match w.strip_suffix('S').unwrap_or(&w) {
            "SECOND" => IntervalUnit::Second,
            "MINUTE" => IntervalUnit::Minute,
            "HOUR" => IntervalUnit::Hour,
            "DAY" => IntervalUnit::Day,
            "WEEK" => IntervalUnit::Week,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interval {
    pub count: i64,
    pub unit: IntervalUnit,
}

impl Interval {
    pub fn millis(self) -> Option<i64> {
        self.count.checked_mul(self.unit.millis())
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "INTERVAL '{}' {}", self.count, self.unit.keyword())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    Timestamp(Timestamp),
    Interval(Interval),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Eq => "=",
            BinOp::NotEq => "!=",
            BinOp::Lt => "<",
            BinOp::LtEq => "<=",
            BinOp::Gt => ">",
            BinOp::GtEq => ">=",
            BinOp::And => "AND",
            BinOp::Or => "OR",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::NotEq | BinOp::Lt | BinOp::LtEq | BinOp::Gt | BinOp::GtEq)
    }

    pub fn is_arithmetic(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggFunc {
    Count,
    Sum,
    Min,
    Max,
    Avg,
}

impl AggFunc {
    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "COUNT",
            AggFunc::Sum => "SUM",
            AggFunc::Min => "MIN",
            AggFunc::Max => "MAX",
            AggFunc::Avg => "AVG",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Some(match word.to_ascii_uppercase().as_str() {
            "COUNT" => AggFunc::Count,
            "SUM" => AggFunc::Sum,
            "MIN" => AggFunc::Min,
            "MAX" => AggFunc::Max,
            "AVG" => AggFunc::Avg,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Column { qualifier: Option<String>, name: String },
    Literal(Literal),
    Binary { op: BinOp, left: Box<Expr>, right: Box<Expr> },
    Not(Box<Expr>),
    Neg(Box<Expr>),
    IsNull { expr: Box<Expr>, negated: bool },
    Between { expr: Box<Expr>, low: Box<Expr>, high: Box<Expr> },
    /// `arg == None` is `COUNT(*)`.
    Aggregate { func: AggFunc, arg: Option<Box<Expr>> },
}

impl Expr {
    pub fn col(qualifier: Option<&str>, name: &str) -> Expr {
        Expr::Column { qualifier: qualifier.map(str::to_string), name: name.to_string() }
    }

    pub fn binary(op: BinOp, left: Expr, right: Expr) -> Expr {
        Expr::Binary { op, left: Box::new(left), right: Box::new(right) }
    }

    pub fn contains_aggregate(&self) -> bool {
        match self {
            Expr::Aggregate { .. } => true,
            Expr::Column { .. } | Expr::Literal(_) => false,
            Expr::Binary { left, right, .. } => left.contains_aggregate() || right.contains_aggregate(),
            Expr::Not(e) | Expr::Neg(e) | Expr::IsNull { expr: e, .. } => e.contains_aggregate(),
            Expr::Between { expr, low, high } => {
                expr.contains_aggregate() || low.contains_aggregate() || high.contains_aggregate()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JoinKind {
    Inner,
    Left,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectItem {
    pub expr: Expr,
    pub alias: Option<String>,
}

/// Operator tree. Parsed queries always have the shape
/// `Project(TumbleAggregate?(Filter?(IntervalJoin?(Scan, Scan) | Scan)))`.
#[derive(Clone, Debug, PartialEq)]
pub enum LogicalPlan {
    Scan {
        table: String,
        alias: String,
    },
    /// Right event time constrained to `[left_time, left_time + upper_bound]`.
    IntervalJoin {
        left: Box<LogicalPlan>,
        right: Box<LogicalPlan>,
        kind: JoinKind,
        /// `(left expr, right expr)` equality pairs.
        keys: Vec<(Expr, Expr)>,
        left_time: Expr,
        right_time: Expr,
        upper_bound: Interval,
    },
    Filter {
        input: Box<LogicalPlan>,
        predicate: Expr,
    },
    TumbleAggregate {
        input: Box<LogicalPlan>,
        time_column: Expr,
        window: Interval,
        group_by: Vec<Expr>,
    },
    Project {
        input: Box<LogicalPlan>,
        items: Vec<SelectItem>,
    },
}

impl LogicalPlan {
    /// Scans in left-to-right order.
    pub fn scans(&self) -> Vec<(&str, &str)> {
        match self {
            LogicalPlan::Scan { table, alias } => vec![(table.as_str(), alias.as_str())],
            LogicalPlan::IntervalJoin { left, right, .. } => {
                let mut v = left.scans();
                v.extend(right.scans());
                v
            }
            LogicalPlan::Filter { input, .. }
            | LogicalPlan::TumbleAggregate { input, .. }
            | LogicalPlan::Project { input, .. } => input.scans(),
        }
    }
}

fn write_ident(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    f.write_str(name)
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Null => f.write_str("NULL"),
            Literal::Bool(true) => f.write_str("TRUE"),
            Literal::Bool(false) => f.write_str("FALSE"),
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => {
                let mut buf = ryu::Buffer::new();
                f.write_str(buf.format_finite(*x))
            }
            Literal::String(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Timestamp(t) => write!(f, "TIMESTAMP '{t}'"),
            Literal::Interval(i) => write!(f, "{i}"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Column { qualifier, name } => {
                if let Some(q) = qualifier {
                    write_ident(f, q)?;
                    f.write_str(".")?;
                }
                write_ident(f, name)
            }
            Expr::Literal(l) => write!(f, "{l}"),
            Expr::Binary { op, left, right } => write!(f, "({left} {} {right})", op.symbol()),
            Expr::Not(e) => write!(f, "(NOT {e})"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::IsNull { expr, negated } => {
                write!(f, "({expr} IS {}NULL)", if *negated { "NOT " } else { "" })
            }
            Expr::Between { expr, low, high } => write!(f, "({expr} BETWEEN {low} AND {high})"),
            Expr::Aggregate { func, arg } => match arg {
                None => write!(f, "{}(*)", func.name()),
                Some(a) => write!(f, "{}({a})", func.name()),
            },
        }
    }
}

impl fmt::Display for LogicalPlan {
    /// Renders the plan back to query text that parses to the same plan.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let LogicalPlan::Project { input, items } = self else {
            return write!(f, "<{self:?}>");
        };
        f.write_str("SELECT ")?;
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}", item.expr)?;
            if let Some(a) = &item.alias {
                write!(f, " AS {a}")?;
            }
        }
        let mut node = input.as_ref();
        let mut group = None;
        let mut filter = None;
        if let LogicalPlan::TumbleAggregate { input, time_column, window, group_by } = node {
            group = Some((time_column, window, group_by));
            node = input;
        }
        if let LogicalPlan::Filter { input, predicate } = node {
            filter = Some(predicate);
            node = input;
        }
        match node {
            LogicalPlan::Scan { table, alias } => write!(f, " FROM {table} AS {alias}")?,
            LogicalPlan::IntervalJoin { left, right, kind, keys, left_time, right_time, upper_bound } => {
                let (LogicalPlan::Scan { table: lt, alias: la }, LogicalPlan::Scan { table: rt, alias: ra }) =
                    (left.as_ref(), right.as_ref())
                else {
                    return write!(f, " <{node:?}>");
                };
                write!(f, " FROM {lt} AS {la} ")?;
                if *kind == JoinKind::Left {
                    f.write_str("LEFT ")?;
                }
                write!(f, "JOIN {rt} AS {ra} ON ")?;
                for (l, r) in keys {
                    write!(f, "{l} = {r} AND ")?;
                }
                write!(f, "{right_time} BETWEEN {left_time} AND {left_time} + {upper_bound}")?;
            }
            other => write!(f, " <{other:?}>")?,
        }
        if let Some(p) = filter {
            write!(f, " WHERE {p}")?;
        }
        if let Some((time_column, window, group_by)) = group {
            write!(f, " GROUP BY TUMBLE({time_column}, {window})")?;
            for g in group_by {
                write!(f, ", {g}")?;
            }
        }
        Ok(())
    }
}
