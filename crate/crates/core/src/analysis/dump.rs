//! Attention dumps and their on-disk container.
//!
//! ```text
//! offset size  field
//!      0    4  magic "MPAD"
//!      4    4  version (u32, = 1)
//!      8    8  model fingerprint (u64)
//!     16    4  section count (u32)
//!     20    .  sections: tag (u32), payload length (u64), payload
//!    end    4  CRC32 of every preceding byte
//! ```
//!
//! Section payloads, all little-endian:
//!
//! - `1` segments: count, then `(kind u8, start u32, len u32)` per segment,
//!   kind 0 = text, 1 = image.
//! - `2` rows: `n_layers, n_heads, cols` then f32 `[layer][head][col]`.
//! - `3` scores: `layer, n_heads, n` then f32 `[head][row][col]`.

use crate::error::{Error, FormatError, Result};
use crate::kv::KvTensor;
use crate::linker::SegmentedPrompt;
use crate::model::{AttentionCapture, Model};
use crate::store::format::{checked_body, Reader, Writer};

pub const DUMP_MAGIC: [u8; 4] = *b"MPAD";
pub const DUMP_VERSION: u32 = 1;

const TAG_SEGMENTS: u32 = 1;
const TAG_ROWS: u32 = 2;
const TAG_SCORES: u32 = 3;

/// Rows may deviate from unit mass by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub image: bool,
    pub start: usize,
    pub len: usize,
}

/// Scaled pre-softmax scores of every prompt row at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub layer: usize,
    pub n: usize,
    /// `[head]`: row-major `n x n`; entries above the diagonal are zero.
    pub heads: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub model_fingerprint: u64,
    pub segments: Vec<SegmentSpan>,
    /// `[layer][head]`: the first output token's softmax row over the
    /// prompt followed by itself.
    pub rows: Vec<Vec<Vec<f32>>>,
    pub scores: Option<LayerScores>,
}

impl AttentionDump {
    pub fn new(
        model_fingerprint: u64,
        segments: Vec<SegmentSpan>,
        rows: Vec<Vec<Vec<f32>>>,
        scores: Option<LayerScores>,
    ) -> Result<Self> {
        let dump = Self {
            model_fingerprint,
            segments,
            rows,
            scores,
        };
        dump.validate()?;
        Ok(dump)
    }

    /// Runs the prompt through `model`, takes the greedy first output token
    /// and records its attention rows. With `scores_layer`, also keeps that
    /// layer's full prompt score matrix.
    pub fn capture(model: &Model, prompt: &SegmentedPrompt, scores_layer: Option<usize>) -> Result<Self> {
        let cfg = model.config();
        if scores_layer.is_some_and(|l| l >= cfg.n_layers) {
            return Err(Error::Validation(format!("model has {} layers", cfg.n_layers)));
        }
        let tokens = prompt.tokens();
        let n = tokens.len();
        let mut cache = KvTensor::zeros(cfg.n_layers, n, cfg.n_heads, cfg.head_dim);
        let slots: Vec<usize> = (0..n).collect();
        let mut prefill = AttentionCapture {
            scores_layer,
            ..AttentionCapture::default()
        };
        let out = model.forward_rows(&mut cache, &tokens, &slots, &slots, Some(&mut prefill))?;
        let first = out.logits.argmax();
        cache.grow(1);
        let mut step = AttentionCapture::default();
        model.forward_rows(&mut cache, &[first], &[n], &[n], Some(&mut step))?;

        let segments = prompt
            .segments()
            .iter()
            .zip(prompt.starts())
            .map(|(s, &start)| SegmentSpan {
                image: s.is_image(),
                start,
                len: s.len(),
            })
            .collect();
        let scores = scores_layer.map(|layer| LayerScores {
            layer,
            n,
            heads: prefill.layer_scores,
        });
        Self::new(model.fingerprint(), segments, step.last_row, scores)
    }

    pub fn n_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn n_heads(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn n_prompt(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    pub fn image_columns(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.image)
            .flat_map(|s| s.start..s.start + s.len)
            .collect()
    }

    pub fn first_image_segment(&self) -> Option<usize> {
        self.segments.iter().position(|s| s.image)
    }

    pub fn segment(&self, index: usize) -> Result<SegmentSpan> {
        self.segments
            .get(index)
            .copied()
            .ok_or_else(|| Error::Validation(format!("dump has {} segments, asked for {index}", self.segments.len())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != next || s.len == 0 {
                return Err(Error::Validation(format!("segment {i} does not continue the prompt")));
            }
            next += s.len;
        }
        if next == 0 {
            return Err(Error::Validation("dump has no prompt tokens".into()));
        }
        let cols = next + 1;
        let heads = self.n_heads();
        if self.rows.is_empty() || heads == 0 {
            return Err(Error::Validation("dump has no attention rows".into()));
        }
        for (l, layer) in self.rows.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::Validation(format!("layer {l} has {} heads, expected {heads}", layer.len())));
            }
            for (h, row) in layer.iter().enumerate() {
                if row.len() != cols {
                    return Err(Error::Validation(format!(
                        "row {l}/{h} has {} columns, expected {cols}",
                        row.len()
                    )));
                }
                let sum: f64 = row.iter().map(|&x| x as f64).sum();
                if row.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::Validation(format!("row {l}/{h} is not a distribution (sum {sum})")));
                }
            }
        }
        if let Some(s) = &self.scores {
            if s.layer >= self.rows.len() || s.n != next || s.heads.len() != heads {
                return Err(Error::Validation("score matrix does not match the dump".into()));
            }
            if s.heads.iter().any(|h| h.len() != s.n * s.n) {
                return Err(Error::Validation("score matrix has the wrong size".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_capacity(64);
        w.bytes(&DUMP_MAGIC);
        w.u32(DUMP_VERSION);
        w.u64(self.model_fingerprint);
        w.u32(if self.scores.is_some() { 3 } else { 2 });

        let mut seg = Writer::with_capacity(4 + 9 * self.segments.len());
        seg.u32(u32_of(self.segments.len())?);
        for s in &self.segments {
            seg.u8(u8::from(s.image));
            seg.u32(u32_of(s.start)?);
            seg.u32(u32_of(s.len)?);
        }
        section(&mut w, TAG_SEGMENTS, seg.into_bytes());

        let mut rows = Writer::with_capacity(12);
        rows.u32(u32_of(self.n_layers())?);
        rows.u32(u32_of(self.n_heads())?);
        rows.u32(u32_of(self.n_prompt() + 1)?);
        for row in self.rows.iter().flatten() {
            rows.f32s(row);
        }
        section(&mut w, TAG_ROWS, rows.into_bytes());

        if let Some(s) = &self.scores {
            let mut sc = Writer::with_capacity(12);
            sc.u32(u32_of(s.layer)?);
            sc.u32(u32_of(s.heads.len())?);
            sc.u32(u32_of(s.n)?);
            for h in &s.heads {
                sc.f32s(h);
            }
            section(&mut w, TAG_SCORES, sc.into_bytes());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = checked_body(bytes)?;
        let mut r = Reader::new(body);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != DUMP_MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(FormatError::BadVersion(version).into());
        }
        let model_fingerprint = r.u64()?;
        let count = r.u32()?;
        let (mut segments, mut rows, mut scores) = (None, None, None);
        for _ in 0..count {
            let tag = r.u32()?;
            let len = usize::try_from(r.u64()?).map_err(|_| FormatError::Header("section too long".into()))?;
            let payload = r.take(len)?;
            let mut p = Reader::new(payload);
            match tag {
                TAG_SEGMENTS => {
                    let n = p.u32()? as usize;
                    let mut v = Vec::with_capacity(n.min(payload.len()));
                    for _ in 0..n {
                        let image = p.u8()? != 0;
                        let start = p.u32()? as usize;
                        let len = p.u32()? as usize;
                        v.push(SegmentSpan { image, start, len });
                    }
                    segments = Some(v);
                }
                TAG_ROWS => {
                    let (layers, heads, cols) = (p.u32()? as usize, p.u32()? as usize, p.u32()? as usize);
                    let mut v = Vec::with_capacity(layers.min(payload.len()));
                    for _ in 0..layers {
                        let mut layer = Vec::with_capacity(heads.min(payload.len()));
                        for _ in 0..heads {
                            layer.push(p.f32s(cols)?);
                        }
                        v.push(layer);
                    }
                    rows = Some(v);
                }
                TAG_SCORES => {
                    let (layer, heads, n) = (p.u32()? as usize, p.u32()? as usize, p.u32()? as usize);
                    let cells = n
                        .checked_mul(n)
                        .ok_or_else(|| FormatError::Header("score matrix too large".into()))?;
                    let mut v = Vec::with_capacity(heads.min(payload.len()));
                    for _ in 0..heads {
                        v.push(p.f32s(cells)?);
                    }
                    scores = Some(LayerScores { layer, n, heads: v });
                }
                other => return Err(FormatError::Section(other).into()),
            }
            if p.position() != payload.len() {
                return Err(FormatError::Header(format!("section {tag} has trailing bytes")).into());
            }
        }
        if r.position() != body.len() {
            return Err(FormatError::Header("trailing bytes after sections".into()).into());
        }
        let segments = segments.ok_or_else(|| FormatError::Header("missing segments section".into()))?;
        let rows = rows.ok_or_else(|| FormatError::Header("missing rows section".into()))?;
        Self::new(model_fingerprint, segments, rows, scores)
    }
}

fn section(w: &mut Writer, tag: u32, payload: Vec<u8>) {
    w.u32(tag);
    w.u64(payload.len() as u64);
    w.bytes(&payload);
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))
}
