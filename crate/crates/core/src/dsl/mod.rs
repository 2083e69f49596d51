//! The transform query language: a small streaming SQL dialect with
//! tumbling windows and interval joins.

mod analyze;
mod ast;
mod lexer;
mod parser;

pub use analyze::{
    analyze, classify, temporal_reach, AggSpec, AnalyzeError, InputDef, Operator, PlanClass, TExpr, Ty, Typed,
    TypedInput, TypedPlan, EVENT_TIME,
};
pub use ast::{AggFunc, BinOp, Expr, Interval, IntervalUnit, JoinKind, Literal, LogicalPlan, SelectItem};
pub use lexer::Pos;
pub use parser::{parse, SyntaxError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
}

/// Parses and analyzes in one step.
pub fn compile(
    text: &str,
    inputs: &std::collections::BTreeMap<String, InputDef>,
) -> Result<TypedPlan, QueryError> {
    Ok(analyze(&parse(text)?, inputs)?)
}
