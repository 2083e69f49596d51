//! Datasets as append-only bitemporal event ledgers.
//!
//! Every dataset is a hash-linked metadata chain whose blocks reference
//! content-addressed data slices. Root datasets ingest external sources;
//! derivative datasets are defined by a streaming query and computed by a
//! deterministic, watermark-driven engine whose results can be re-executed
//! and byte-compared at any time.

pub mod canonical;
pub mod chain;
pub mod coordinator;
pub mod dsl;
pub mod engine;
pub mod hash;
pub mod ingest;
pub mod par;
pub mod schema;
pub mod slices;
pub mod store;
pub mod sync;
pub mod time;

pub use canonical::Value;
pub use coordinator::{CoordinatorError, Workspace};
pub use chain::{Chain, DatasetId, DatasetKind, MetadataBlock, MetadataEvent};
pub use hash::ObjectHash;
pub use schema::{Column, ColumnType, SchemaDef};
pub use slices::{Record, SliceRef};
pub use store::{ObjectSource, ObjectStore};
pub use time::Timestamp;
