//! Desk-scale decoder-only transformer with seeded weights.
//!
//! Pre-norm blocks: RMS norm, rotary multi-head causal attention, residual,
//! RMS norm, GELU feed-forward (4x width), residual. Keys are cached after the
//! rotary encoding for their position has been applied.

mod forward;
pub(crate) mod math;

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvTensor;

pub use forward::AttentionCapture;

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Tokens the pseudo image encoder emits per image.
    pub image_token_count: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A config with `hidden_dim` derived from heads and head size.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        image_token_count: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim,
            hidden_dim: n_heads * head_dim,
            vocab_size,
            image_token_count,
            rope_base: default_rope_base(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("image_token_count", self.image_token_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} != n_heads {} x head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary pairs".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be a positive real".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds u32 ids".into()));
        }
        Ok(())
    }

    /// Hash of every field; any change yields a different fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"mpic-model-config/1");
        for v in [
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.hidden_dim,
            self.vocab_size,
            self.image_token_count,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.rope_base.to_bits().to_le_bytes());
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Validated token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenIds(Vec<u32>);

impl TokenIds {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Validation("token sequence is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of vocabulary of {vocab_size}"
            )));
        }
        Ok(Self(ids))
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenIds {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// Next-token scores for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f32>);

impl Logits {
    /// Greedy choice; ties go to the lowest id.
    pub fn argmax(&self) -> u32 {
        math::argmax(&self.0) as u32
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f32 {
        assert_eq!(self.0.len(), other.0.len(), "logit widths differ");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl Deref for Logits {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// Softmax attention of one query over its visible keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub scores: Vec<f32>,
}

/// `softmax(q·k_j / sqrt(head_dim))` over `keys`.
pub fn attention_row(q: &[f32], keys: &[Vec<f32>], head_dim: usize) -> Result<AttentionRow> {
    if keys.is_empty() {
        return Err(Error::Validation("attention over zero keys".into()));
    }
    if q.len() != head_dim || keys.iter().any(|k| k.len() != head_dim) {
        return Err(Error::Validation(format!(
            "attention vectors must all have length {head_dim}"
        )));
    }
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut scores: Vec<f32> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale)
        .collect();
    let last = scores.len() - 1;
    math::masked_softmax(&mut scores, last);
    Ok(AttentionRow { scores })
}

/// Per-layer weights, each stored row-major as `[in][out]`.
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

/// Immutable weights plus the config they were built from.
pub struct Model {
    config: ModelConfig,
    fingerprint: u64,
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
    lm_head: Vec<f32>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Synthesises weights from `config.seed`.
    ///
    /// Each matrix is drawn from its own ChaCha8 stream (stream id = matrix
    /// index), uniform with unit variance, then scaled by `1/sqrt(hidden_dim)`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let scale = 1.0 / (h as f32).sqrt();
        let mut stream = 0u64;
        let mut matrix = |len: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream);
            stream += 1;
            let half_width = 3.0f32.sqrt();
            (0..len)
                .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * half_width * scale)
                .collect::<Vec<f32>>()
        };
        let embedding = matrix(config.vocab_size * h);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: matrix(h * h),
                wk: matrix(h * h),
                wv: matrix(h * h),
                wo: matrix(h * h),
                w_up: matrix(h * 4 * h),
                w_down: matrix(4 * h * h),
            })
            .collect();
        let lm_head = matrix(h * config.vocab_size);
        Ok(Self::from_parts(config, embedding, layers, lm_head))
    }

    /// A model whose every weight is zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: vec![0.0; h * h],
                wk: vec![0.0; h * h],
                wv: vec![0.0; h * h],
                wo: vec![0.0; h * h],
                w_up: vec![0.0; h * 4 * h],
                w_down: vec![0.0; 4 * h * h],
            })
            .collect();
        let embedding = vec![0.0; config.vocab_size * h];
        let lm_head = vec![0.0; h * config.vocab_size];
        Ok(Self::from_parts(config, embedding, layers, lm_head))
    }

    fn from_parts(
        config: ModelConfig,
        embedding: Vec<f32>,
        layers: Vec<LayerWeights>,
        lm_head: Vec<f32>,
    ) -> Self {
        Self {
            fingerprint: config.fingerprint(),
            config,
            embedding,
            layers,
            lm_head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Digest of every weight, for reproducibility checks.
    pub fn weight_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut feed = |xs: &[f32]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(&self.embedding);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                feed(m);
            }
        }
        feed(&self.lm_head);
        h.finalize().into()
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    /// `[vocab][hidden]` token embedding table.
    pub fn embedding(&self) -> &[f32] {
        &self.embedding
    }

    pub fn embedding_row(&self, id: u32) -> &[f32] {
        let h = self.config.hidden_dim;
        &self.embedding[id as usize * h..(id as usize + 1) * h]
    }

    /// `[hidden][vocab]` output projection.
    pub fn lm_head(&self) -> &[f32] {
        &self.lm_head
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(bad) => Err(Error::Validation(format!(
                "token id {bad} out of vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// An empty cache with the model's layer/head geometry.
    pub fn empty_cache(&self) -> KvTensor {
        let c = &self.config;
        KvTensor::zeros(c.n_layers, 0, c.n_heads, c.head_dim)
    }

    /// Deterministic pseudo image encoder: expands a SHA-256 of the model
    /// fingerprint and the raw bytes into `image_token_count` ids.
    pub fn encode_image(&self, image_bytes: &[u8]) -> Result<TokenIds> {
        encode_image(image_bytes, &self.config)
    }

    /// Prefill of `tokens` at positions `0..n`.
    pub fn full_prefill(&self, tokens: &[u32]) -> Result<(KvTensor, Logits)> {
        self.prefill_at(tokens, 0)
    }

    /// Prefill of `tokens` as if they started at `position_base`, with no
    /// preceding context. Used to precompute standalone segment caches.
    pub fn prefill_at(&self, tokens: &[u32], position_base: usize) -> Result<(KvTensor, Logits)> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot prefill an empty prompt".into()));
        }
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mut cache = KvTensor::zeros(
            self.config.n_layers,
            n,
            self.config.n_heads,
            self.config.head_dim,
        );
        let slots: Vec<usize> = (0..n).collect();
        let positions: Vec<usize> = (position_base..position_base + n).collect();
        let out = self.forward_rows(&mut cache, tokens, &slots, &positions, None)?;
        Ok((cache, out.logits))
    }

    /// Appends `tokens` after the cached context and returns the logits of the
    /// last one. Positions continue from `cache.n_tokens()`.
    pub fn extend(&self, cache: &mut KvTensor, tokens: &[u32]) -> Result<Logits> {
        if tokens.is_empty() {
            return Err(Error::Validation("nothing to extend with".into()));
        }
        self.check_tokens(tokens)?;
        self.check_geometry(cache)?;
        let start = cache.n_tokens();
        cache.grow(tokens.len());
        let slots: Vec<usize> = (start..start + tokens.len()).collect();
        let out = self.forward_rows(cache, tokens, &slots, &slots, None)?;
        Ok(out.logits)
    }

    /// One decode step: `position` must equal the current cache length.
    pub fn decode_step(&self, cache: &mut KvTensor, next_token: u32, position: usize) -> Result<Logits> {
        if position != cache.n_tokens() {
            return Err(Error::State(format!(
                "decode at position {position} but cache holds {} tokens",
                cache.n_tokens()
            )));
        }
        self.extend(cache, &[next_token])
    }

    /// Greedy continuation of `prompt` for `max_new` tokens.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let (mut cache, mut logits) = self.full_prefill(prompt)?;
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let next = logits.argmax();
            out.push(next);
            if out.len() == max_new {
                break;
            }
            let pos = cache.n_tokens();
            logits = self.decode_step(&mut cache, next, pos)?;
        }
        Ok(out)
    }

    /// Mean of the final (normalised) hidden states of `tokens`.
    pub fn embed_mean(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot embed an empty sequence".into()));
        }
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mut cache = KvTensor::zeros(
            self.config.n_layers,
            n,
            self.config.n_heads,
            self.config.head_dim,
        );
        let slots: Vec<usize> = (0..n).collect();
        let out = self.forward_rows(&mut cache, tokens, &slots, &slots, None)?;
        let h = self.config.hidden_dim;
        let mut mean = vec![0.0f32; h];
        for row in out.hidden.chunks_exact(h) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f32);
        Ok(mean)
    }

    pub(crate) fn check_geometry(&self, cache: &KvTensor) -> Result<()> {
        let c = &self.config;
        if cache.n_layers() != c.n_layers || cache.n_heads() != c.n_heads || cache.head_dim() != c.head_dim {
            return Err(Error::Validation(format!(
                "cache geometry {}x{}x{} does not match model {}x{}x{}",
                cache.n_layers(),
                cache.n_heads(),
                cache.head_dim(),
                c.n_layers,
                c.n_heads,
                c.head_dim
            )));
        }
        Ok(())
    }
}

/// See [`Model::encode_image`].
pub fn encode_image(image_bytes: &[u8], config: &ModelConfig) -> Result<TokenIds> {
    if image_bytes.is_empty() {
        return Err(Error::Validation("image bytes are empty".into()));
    }
    let seed: [u8; 32] = {
        let mut h = Sha256::new();
        h.update(b"mpic-image/1");
        h.update(config.fingerprint().to_le_bytes());
        h.update(image_bytes);
        h.finalize().into()
    };
    let vocab = config.vocab_size as u64;
    let mut ids = Vec::with_capacity(config.image_token_count);
    let mut counter = 0u64;
    while ids.len() < config.image_token_count {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(counter.to_le_bytes());
        let block: [u8; 32] = h.finalize().into();
        counter += 1;
        for word in block.chunks_exact(8) {
            if ids.len() == config.image_token_count {
                break;
            }
            let x = u64::from_le_bytes(word.try_into().expect("8-byte chunk"));
            ids.push((x % vocab) as u32);
        }
    }
    TokenIds::new(ids, config.vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig::new(2, 2, 4, 64, 6, seed)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(small(7)).unwrap();
        let b = Model::build(small(7)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn seeds_change_weights() {
        let a = Model::build(small(7)).unwrap();
        let b = Model::build(small(8)).unwrap();
        assert_ne!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn hidden_dim_mismatch_is_config_error() {
        let mut c = small(7);
        c.hidden_dim = 5;
        c.n_heads = 2;
        c.head_dim = 4;
        assert!(matches!(Model::build(c), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = small(1);
        let fp = base.fingerprint();
        assert_eq!(fp, small(1).fingerprint());
        let variants: Vec<ModelConfig> = vec![
            ModelConfig { n_layers: 3, ..base.clone() },
            ModelConfig { n_heads: 4, hidden_dim: 16, ..base.clone() },
            ModelConfig { head_dim: 2, hidden_dim: 4, ..base.clone() },
            ModelConfig { vocab_size: 65, ..base.clone() },
            ModelConfig { image_token_count: 7, ..base.clone() },
            ModelConfig { rope_base: 500.0, ..base.clone() },
            ModelConfig { seed: 2, ..base.clone() },
        ];
        for v in variants {
            assert_ne!(v.fingerprint(), fp, "{v:?}");
        }
    }

    #[test]
    fn encode_image_contract() {
        let c = small(3);
        let a = encode_image(b"cat.png", &c).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, encode_image(b"cat.png", &c).unwrap());
        assert!(a.iter().all(|&t| (t as usize) < c.vocab_size));
        assert!(matches!(encode_image(b"", &c), Err(Error::Validation(_))));
    }

    #[test]
    fn encode_image_large_count() {
        let mut c = small(3);
        c.image_token_count = 1176;
        assert_eq!(encode_image(&[1, 2, 3], &c).unwrap().len(), 1176);
    }

    #[test]
    fn encode_image_separates_single_byte_edits() {
        let c = ModelConfig::new(1, 1, 2, 1 << 16, 32, 0);
        let base: Vec<u8> = (0..64).collect();
        let reference = encode_image(&base, &c).unwrap();
        for i in 0..base.len() {
            let mut edited = base.clone();
            edited[i] ^= 0x01;
            let ids = encode_image(&edited, &c).unwrap();
            let same = ids.iter().zip(reference.iter()).filter(|(a, b)| a == b).count();
            // independent draws from 65536 ids collide on ~0 of 32 positions
            assert!(same <= 2, "edit at byte {i} left {same} ids unchanged");
        }
    }

    #[test]
    fn attention_row_examples() {
        let one = attention_row(&[0.5, 0.5], &[vec![1.0, 2.0]], 2).unwrap();
        assert_eq!(one.scores, vec![1.0]);

        let r = attention_row(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!((r.scores[0] as f64 - expect[0]).abs() < 1e-6);
        assert!((r.scores[1] as f64 - expect[1]).abs() < 1e-6);
        assert!((r.scores[0] - 0.6698).abs() < 1e-4);

        let keys = vec![vec![0.0, 1.0]; 5];
        let u = attention_row(&[1.0, 0.0], &keys, 2).unwrap();
        assert!(u.scores.iter().all(|s| (s - 0.2).abs() < 1e-7));
    }

    #[test]
    fn attention_row_dimension_mismatch() {
        let err = attention_row(&[1.0, 0.0, 0.0], &[vec![1.0, 0.0]], 2);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn zero_model_is_all_zero() {
        let m = Model::zeros(small(0)).unwrap();
        let (kv, logits) = m.full_prefill(&[1, 2, 3, 4]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        for l in 0..kv.n_layers() {
            assert!(kv.keys(l).iter().all(|&x| x == 0.0));
            assert!(kv.values(l).iter().all(|&x| x == 0.0));
        }
        let mut kv = kv;
        let next = m.decode_step(&mut kv, 5, 4).unwrap();
        assert!(next.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prefill_rejects_out_of_vocab() {
        let m = Model::build(small(0)).unwrap();
        assert!(matches!(m.full_prefill(&[1, 64]), Err(Error::Validation(_))));
    }

    #[test]
    fn decode_position_mismatch_is_state_error() {
        let m = Model::build(small(0)).unwrap();
        let (mut kv, _) = m.full_prefill(&[1, 2, 3]).unwrap();
        assert!(matches!(m.decode_step(&mut kv, 4, 5), Err(Error::State(_))));
        assert_eq!(kv.n_tokens(), 3);
    }

    #[test]
    fn position_zero_key_is_unrotated() {
        let m = Model::build(small(11)).unwrap();
        let (kv, _) = m.full_prefill(&[9]).unwrap();
        // layer 0 key for a lone token = rms_norm(embedding) . wk, no rotation
        let h = m.config().hidden_dim;
        let normed = math::rms_norm(m.embedding_row(9), h);
        let raw = math::project(&normed, 1, h, &m.layer(0).wk, h);
        assert_eq!(kv.key_row(0, 0), raw.as_slice());
    }
}
