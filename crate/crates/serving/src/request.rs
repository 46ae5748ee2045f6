//! Wire types: requests, responses and per-request measurements.

use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefill mode. `Mpic(None)` and `CacheBlend(None)` use the configured
/// defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Mpic(Option<usize>),
    CacheBlend(Option<f64>),
    FullReuse,
    Prefix,
    NoCache,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let bad = || Error::Request(format!("unknown mode {s:?}"));
        match (name, arg) {
            ("mpic", None) => Ok(Mode::Mpic(None)),
            ("mpic", Some(k)) => k.parse().map(|k| Mode::Mpic(Some(k))).map_err(|_| bad()),
            ("cacheblend", None) => Ok(Mode::CacheBlend(None)),
            ("cacheblend", Some(r)) => match r.parse::<f64>() {
                Ok(r) if (0.0..=100.0).contains(&r) => Ok(Mode::CacheBlend(Some(r))),
                _ => Err(bad()),
            },
            ("fullreuse", None) => Ok(Mode::FullReuse),
            ("prefix", None) => Ok(Mode::Prefix),
            ("nocache", None) => Ok(Mode::NoCache),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Mpic(None) => write!(f, "mpic"),
            Mode::Mpic(Some(k)) => write!(f, "mpic:{k}"),
            Mode::CacheBlend(None) => write!(f, "cacheblend"),
            Mode::CacheBlend(Some(r)) => write!(f, "cacheblend:{r}"),
            Mode::FullReuse => write!(f, "fullreuse"),
            Mode::Prefix => write!(f, "prefix"),
            Mode::NoCache => write!(f, "nocache"),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

pub fn parse_modes(list: &str) -> Result<Vec<Mode>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SegmentSource {
    Text {
        text: String,
    },
    /// A library image by id, inline base64 bytes, or both.
    Image {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cache_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<String>,
    },
}

impl SegmentSource {
    pub fn text(s: impl Into<String>) -> Self {
        SegmentSource::Text { text: s.into() }
    }

    pub fn cached(cache_id: impl Into<String>) -> Self {
        SegmentSource::Image {
            cache_id: Some(cache_id.into()),
            data: None,
        }
    }

    pub fn inline(bytes: &[u8]) -> Self {
        SegmentSource::Image {
            cache_id: None,
            data: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
        }
    }
}

pub(crate) fn decode_inline(data: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| Error::Request(format!("image data is not base64: {e}")))
}

fn default_max_tokens() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default)]
    pub request_id: String,
    pub user: String,
    pub mode: Mode,
    pub segments: Vec<SegmentSource>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub request_id: String,
    pub mode: String,
    pub images: usize,
    pub prompt_tokens: usize,
    /// Arrival to first output token.
    pub ttft_s: f64,
    /// Arrival to the start of processing.
    pub queue_s: f64,
    /// Cache preparation plus prefill.
    pub prefill_s: f64,
    pub prefill_tokens_recomputed: usize,
    pub output_tokens: usize,
    /// Seconds since the Unix epoch.
    pub completed_at: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub loaded: usize,
    pub computed: usize,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub request_id: String,
    pub text: String,
    pub output_ids: Vec<u32>,
    pub record: BenchRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepare: Option<PrepareSummary>,
    /// Cache ids linked in after a retrieval trigger.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved: Vec<String>,
    /// Logits that produced the first output token; not sent over the wire.
    #[serde(skip)]
    pub first_logits: Vec<f32>,
}
