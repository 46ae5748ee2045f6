//! Serving front for position-independent multimodal KV-cache reuse: request
//! handling, a FIFO worker pool, a line-delimited JSON socket server and the
//! offline/online measurement harnesses.

pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod library;
pub mod pool;
pub mod request;
pub mod server;
pub mod tokenizer;
pub mod workload;

pub use config::ServeConfig;
pub use engine::Engine;
pub use error::{Error, Result};
pub use request::{BenchRecord, Mode, Request, Response, SegmentSource};
