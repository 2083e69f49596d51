//! Deterministic, watermark-driven execution of analyzed plans.
//!
//! [`execute`] is a pure function of its request. State between calls lives
//! in an [`EngineState`], whose canonical encoding is the checkpoint.

mod eval;
mod exec;
mod state;
mod version;

pub use eval::{eval, is_true, EvalError};
pub use exec::{advance_watermark, execute, InputBatch, OutputRow, TransformRequest, TransformResponse};
pub use state::{checkpoint_load, checkpoint_save, Buffered, EngineState, Partial, WindowState};
pub use version::{EngineVersion, ENGINE_NAME, ENGINE_SEMVER, PLAN_SEMANTICS_REVISION};

use crate::dsl::TypedPlan;
use crate::store::StoreError;
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("watermark of input {input} regressed from {previous:?} to {proposed:?}")]
    WatermarkRegression { input: usize, previous: Option<Timestamp>, proposed: Option<Timestamp> },
    #[error("input {input} does not match the plan schema (offset {offset:?}): {message}")]
    SchemaMismatch { input: usize, offset: Option<u64>, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The new query cannot continue from the old query's state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResetRequired;

/// Carries a checkpoint over a query change when only filter and projection
/// expressions differ, or inputs gained trailing nullable columns (buffered
/// rows are padded with nulls). Anything touching state shape requires a reset.
pub fn handle_query_change(
    old: &TypedPlan,
    new: &TypedPlan,
    checkpoint: &EngineState,
) -> Result<EngineState, ResetRequired> {
    let compatible_inputs = old.inputs.len() == new.inputs.len()
        && old.inputs.iter().zip(&new.inputs).all(|(a, b)| b.schema.is_nullable_extension_of(&a.schema));
    if old.class() != new.class()
        || old.temporal_reach() != new.temporal_reach()
        || old.operator != new.operator
        || !compatible_inputs
    {
        return Err(ResetRequired);
    }
    let mut state = checkpoint.clone();
    let pad = |buffer: &mut Vec<Buffered>, width: usize| {
        for b in buffer {
            b.payload.resize(width, crate::canonical::Value::Null);
        }
    };
    pad(&mut state.left_buffer, new.inputs[0].schema.len());
    if let Some(right) = new.inputs.get(1) {
        pad(&mut state.right_buffer, right.schema.len());
    }
    Ok(state)
}
