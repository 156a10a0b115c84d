//! Storage-aware approximate nearest neighbour search.
//!
//! An HNSW graph lives in memory while vector payloads live in a three-tier
//! hierarchy: two in-memory caches in front of an external store that charges
//! per transaction. Queries defer payload loads and flush them in batches so
//! the number of external transactions stays small, and a budget optimizer
//! shrinks the caches while a latency threshold still holds.

pub mod bench;
pub mod bundle;
pub mod distance;
pub mod error;
pub mod hnsw;
pub mod ingest;
pub mod lazy;
pub mod optimizer;
pub mod policy;
pub mod snapshot;
pub mod store;
pub mod text;

/// Identifier of a stored vector.
pub type VectorId = u64;

pub use distance::{Embedding, Metric};
pub use error::{Error, Result};
pub use hnsw::{HnswIndex, HnswParams, SearchHit, SearchParams};
pub use lazy::{search_lazy, QueryStats};
pub use optimizer::{optimize_memory_size, OptimizerParams, OptimizerState};
pub use policy::FetchPolicy;
pub use snapshot::{load_index, save_index, IndexSnapshot};
pub use store::{
    DiskStore, ExternalStore, LatencyModel, SimulatedStore, TierConfig, TieredVectorStore,
};
pub use text::TextStore;
