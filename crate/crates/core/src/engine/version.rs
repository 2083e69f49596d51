use std::fmt;

use crate::canonical::{hash_value, DecodeError, Fields, Value};
use crate::hash::ObjectHash;

/// Revision of the plan semantics implemented by [`super::execute`]. Bump on
/// any change that can alter outputs, checkpoints, or watermarks.
pub const PLAN_SEMANTICS_REVISION: i64 = 1;

pub const ENGINE_NAME: &str = "odf-desk-sql";
pub const ENGINE_SEMVER: &str = env!("CARGO_PKG_VERSION");

/// Identity of the engine that produced a transform's results.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EngineVersion {
    pub name: String,
    pub version_hash: ObjectHash,
}

impl EngineVersion {
    pub fn new(name: &str, semver: &str, semantics_revision: i64) -> Self {
        let digest_input = Value::map([
            ("name", Value::str(name)),
            ("version", Value::str(semver)),
            ("plan_semantics", Value::Int(semantics_revision)),
        ]);
        EngineVersion {
            name: name.to_string(),
            version_hash: hash_value(&digest_input).expect("finite"),
        }
    }

    /// The engine compiled into this build.
    pub fn current() -> Self {
        Self::new(ENGINE_NAME, ENGINE_SEMVER, PLAN_SEMANTICS_REVISION)
    }

    pub fn to_value(&self) -> Value {
        Value::map([("name", Value::str(&self.name)), ("version_hash", Value::hash(&self.version_hash))])
    }

    pub fn from_fields(f: &Fields<'_>) -> Result<Self, DecodeError> {
        f.only(&["name", "version_hash"])?;
        Ok(EngineVersion { name: f.str("name")?.to_string(), version_hash: f.hash("version_hash")? })
    }
}

impl fmt::Display for EngineVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, &self.version_hash.to_hex()[..12])
    }
}
