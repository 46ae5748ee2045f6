//! Position-independent KV-cache reuse for interleaved text/image prompts.
//!
//! - [`model`]: a small deterministic transformer that doubles as the exact
//!   reference for every reuse mode.
//! - [`store`]: tiered, content-addressed storage of precomputed KV caches.
//! - [`linker`]: assembles reused caches at arbitrary positions and runs the
//!   single-pass selective prefill, plus the prefix, full-reuse and
//!   CacheBlend baselines.
//! - [`transfer`]: concurrent load-or-compute preparation of the caches a
//!   request needs.
//! - [`retriever`]: exact cosine search over the dynamic reference library.
//! - [`analysis`]: attention and KV-distance diagnostics over dump files.

pub mod analysis;
pub mod error;
pub mod kv;
pub mod linker;
pub mod model;
pub mod retriever;
pub mod store;
pub mod transfer;

pub use error::{Error, FormatError, Result};
pub use kv::KvTensor;
pub use linker::{
    KScope, LinkedCache, Linker, LinkerConfig, PrefillOutput, PrefillStats, Reposition, Segment, SegmentedPrompt,
    SelectionMask, SelectionPolicy, SlotSource,
};
pub use model::{Logits, Model, ModelConfig, TokenIds};
pub use retriever::{RetrievalQuery, Retriever, SentinelTrigger};
pub use store::{CacheKey, CacheStore, KvCacheEntry, LookupReport, StoreConfig, Tier};
pub use transfer::{FaultInjection, PrepareItem, PrepareReport, PrepareRequest, TransferConfig};
