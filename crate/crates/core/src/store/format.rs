//! Little-endian on-disk container for one cached segment.
//!
//! ```text
//! offset size  field
//!      0    4  magic "MPIC"
//!      4    4  version (u32, = 1)
//!      8    8  model fingerprint (u64)
//!     16    8  namespace hash (u64)
//!     24   32  content hash
//!     56    4  position base (u32)
//!     60    4  n_layers (u32)
//!     64    4  n_tokens (u32)
//!     68    4  n_heads (u32)
//!     72    4  head_dim (u32)
//!     76    1  dtype (u8, 0 = f32)
//!     77    7  reserved (zero)
//!     84    .  K for every layer, then V for every layer, row-major f32
//!    end    4  CRC32 of every preceding byte
//! ```

use crate::error::{Error, FormatError, Result};
use crate::kv::KvTensor;

use super::{CacheKey, KvCacheEntry};

pub const MAGIC: [u8; 4] = *b"MPIC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 84;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub model_fingerprint: u64,
    pub namespace_hash: u64,
    pub content_hash: [u8; 32],
    pub position_base: u32,
    pub n_layers: u32,
    pub n_tokens: u32,
    pub n_heads: u32,
    pub head_dim: u32,
}

impl Header {
    fn payload_floats(&self) -> usize {
        2 * self.n_layers as usize
            * self.n_tokens as usize
            * self.n_heads as usize
            * self.head_dim as usize
    }

    pub fn file_len(&self) -> usize {
        HEADER_LEN + 4 * self.payload_floats() + 4
    }
}

/// A decoded file: header plus tensor, not yet checked against a key.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: Header,
    pub kv: KvTensor,
}

impl Decoded {
    /// Checks the file belongs to `key` before it is used for inference.
    pub fn verify_for(&self, key: &CacheKey) -> Result<()> {
        if self.header.model_fingerprint != key.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: key.model_fingerprint,
                found: self.header.model_fingerprint,
            });
        }
        if self.header.namespace_hash != key.namespace_hash() {
            return Err(Error::Validation(format!(
                "file namespace hash {:016x} does not match {}",
                self.header.namespace_hash, key.namespace
            )));
        }
        if self.header.content_hash != key.content_hash {
            return Err(Error::Validation("file content hash does not match key".into()));
        }
        Ok(())
    }
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                needed: end,
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Header("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Verifies the trailing CRC32 and returns the covered body.
pub(crate) fn checked_body(bytes: &[u8]) -> std::result::Result<&[u8], FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(body)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))
}

pub fn serialize(entry: &KvCacheEntry) -> Result<Vec<u8>> {
    let kv = &entry.kv;
    let floats = 2 * kv.n_layers() * kv.n_tokens() * kv.width();
    let mut w = Writer::with_capacity(HEADER_LEN + 4 * floats + 4);
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.u64(entry.key.model_fingerprint);
    w.u64(entry.key.namespace_hash());
    w.bytes(&entry.key.content_hash);
    w.u32(to_u32(entry.position_base, "position_base")?);
    w.u32(to_u32(kv.n_layers(), "n_layers")?);
    w.u32(to_u32(kv.n_tokens(), "n_tokens")?);
    w.u32(to_u32(kv.n_heads(), "n_heads")?);
    w.u32(to_u32(kv.head_dim(), "head_dim")?);
    w.u8(DTYPE_F32);
    w.bytes(&[0u8; 7]);
    debug_assert_eq!(w.buf.len(), HEADER_LEN);
    for l in 0..kv.n_layers() {
        w.f32s(kv.keys(l));
    }
    for l in 0..kv.n_layers() {
        w.f32s(kv.values(l));
    }
    Ok(w.finish())
}

/// Parses the fixed header without touching the payload or checksum.
pub fn read_header(bytes: &[u8]) -> std::result::Result<Header, FormatError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let model_fingerprint = r.u64()?;
    let namespace_hash = r.u64()?;
    let content_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let position_base = r.u32()?;
    let n_layers = r.u32()?;
    let n_tokens = r.u32()?;
    let n_heads = r.u32()?;
    let head_dim = r.u32()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::BadDtype(dtype));
    }
    r.take(7)?;
    if n_layers == 0 || n_tokens == 0 || n_heads == 0 || head_dim == 0 {
        return Err(FormatError::Header("zero tensor dimension".into()));
    }
    Ok(Header {
        model_fingerprint,
        namespace_hash,
        content_hash,
        position_base,
        n_layers,
        n_tokens,
        n_heads,
        head_dim,
    })
}

pub fn deserialize(bytes: &[u8]) -> std::result::Result<Decoded, FormatError> {
    let header = read_header(bytes)?;
    let expected = header.file_len();
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            needed: expected,
            available: bytes.len(),
        });
    }
    let body = checked_body(bytes)?;
    let mut r = Reader::new(body);
    r.take(HEADER_LEN)?;
    let per_layer = header.n_tokens as usize * header.n_heads as usize * header.head_dim as usize;
    let keys = (0..header.n_layers)
        .map(|_| r.f32s(per_layer))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let values = (0..header.n_layers)
        .map(|_| r.f32s(per_layer))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let kv = KvTensor::from_layers(header.n_heads as usize, header.head_dim as usize, keys, values)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    Ok(Decoded { header, kv })
}
