use std::path::PathBuf;

use thiserror::Error;

use crate::store::CacheKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("cannot link cache: {0}")]
    Link(String),

    #[error("selection contract violated: {0}")]
    Contract(String),

    #[error("malformed cache file: {0}")]
    Format(#[from] FormatError),

    #[error("integrity check failed for {}: {source}", path.display())]
    Integrity {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("model fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("cache entry not found: {0}")]
    NotFound(CacheKey),

    #[error("no cached entry and no source bytes for {0}")]
    Unresolvable(CacheKey),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding the binary cache / dump container.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid header field: {0}")]
    Header(String),
    #[error("unexpected section tag {0:#x}")]
    Section(u32),
}
