//! Layer-major key/value storage.

use crate::error::{Error, Result};

/// Keys and values for a run of tokens, shaped `[layer][token][head][head_dim]`.
///
/// Each layer is kept in its own contiguous buffer so a decode step can append
/// one token without moving the rest of the cache. Keys are stored after the
/// rotary encoding for their position has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct KvTensor {
    n_heads: usize,
    head_dim: usize,
    n_tokens: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvTensor {
    pub fn zeros(n_layers: usize, n_tokens: usize, n_heads: usize, head_dim: usize) -> Self {
        let width = n_heads * head_dim;
        Self {
            n_heads,
            head_dim,
            n_tokens,
            keys: vec![vec![0.0; n_tokens * width]; n_layers],
            values: vec![vec![0.0; n_tokens * width]; n_layers],
        }
    }

    /// Builds a tensor from per-layer key and value buffers.
    pub fn from_layers(
        n_heads: usize,
        head_dim: usize,
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let width = n_heads * head_dim;
        if width == 0 || keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Validation(format!(
                "kv layers: {} key layers, {} value layers, width {width}",
                keys.len(),
                values.len()
            )));
        }
        let len = keys[0].len();
        if len % width != 0 || keys.iter().chain(&values).any(|l| l.len() != len) {
            return Err(Error::Validation("ragged kv layer buffers".into()));
        }
        Ok(Self {
            n_heads,
            head_dim,
            n_tokens: len / width,
            keys,
            values,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Elements per token per layer (`n_heads * head_dim`).
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub fn keys_mut(&mut self, layer: usize) -> &mut [f32] {
        &mut self.keys[layer]
    }

    pub fn values_mut(&mut self, layer: usize) -> &mut [f32] {
        &mut self.values[layer]
    }

    pub fn key_row(&self, layer: usize, token: usize) -> &[f32] {
        let w = self.width();
        &self.keys[layer][token * w..(token + 1) * w]
    }

    pub fn value_row(&self, layer: usize, token: usize) -> &[f32] {
        let w = self.width();
        &self.values[layer][token * w..(token + 1) * w]
    }

    pub fn key_row_mut(&mut self, layer: usize, token: usize) -> &mut [f32] {
        let w = self.width();
        &mut self.keys[layer][token * w..(token + 1) * w]
    }

    pub fn value_row_mut(&mut self, layer: usize, token: usize) -> &mut [f32] {
        let w = self.width();
        &mut self.values[layer][token * w..(token + 1) * w]
    }

    /// Appends `count` zero-filled token slots to every layer.
    pub fn grow(&mut self, count: usize) {
        let extra = count * self.width();
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            layer.resize(layer.len() + extra, 0.0);
        }
        self.n_tokens += count;
    }

    /// Copies tokens `[start, start + len)` into a new tensor.
    pub fn slice_tokens(&self, start: usize, len: usize) -> Self {
        let w = self.width();
        let range = start * w..(start + len) * w;
        Self {
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            n_tokens: len,
            keys: self.keys.iter().map(|l| l[range.clone()].to_vec()).collect(),
            values: self.values.iter().map(|l| l[range.clone()].to_vec()).collect(),
        }
    }

    /// Copies every layer of `src` token `src_token` into `dst_token`.
    pub fn copy_token_from(&mut self, dst_token: usize, src: &KvTensor, src_token: usize) {
        for layer in 0..self.n_layers() {
            self.key_row_mut(layer, dst_token)
                .copy_from_slice(src.key_row(layer, src_token));
            self.value_row_mut(layer, dst_token)
                .copy_from_slice(src.value_row(layer, src_token));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.keys
            .iter()
            .chain(&self.values)
            .all(|l| l.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &KvTensor) -> Option<f32> {
        if self.n_layers() != other.n_layers()
            || self.n_tokens != other.n_tokens
            || self.width() != other.width()
        {
            return None;
        }
        let diff = self
            .keys
            .iter()
            .chain(&self.values)
            .zip(other.keys.iter().chain(&other.values))
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max);
        Some(diff)
    }

    /// Bitwise equality of all stored values.
    pub fn bit_eq(&self, other: &KvTensor) -> bool {
        self.n_layers() == other.n_layers()
            && self.n_tokens == other.n_tokens
            && self.n_heads == other.n_heads
            && self.head_dim == other.head_dim
            && self
                .keys
                .iter()
                .chain(&self.values)
                .zip(other.keys.iter().chain(&other.values))
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn size_bytes(&self) -> usize {
        2 * self.n_layers() * self.n_tokens * self.width() * std::mem::size_of::<f32>()
    }
}
