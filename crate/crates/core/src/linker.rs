//! Linking precomputed segment caches into a prompt and prefilling the rest.
//!
//! A [`SegmentedPrompt`] interleaves text with references to cached image
//! segments. The linker copies each image's stored KV rows into its global
//! slots, leaves zero-filled dummy slots for the text, and then runs one
//! engine pass over the selected tokens: every selected row gets fresh Q/K/V
//! at its true position, its K/V replace the linked slot, and it attends over
//! the whole linked cache. Unselected image rows are used exactly as stored.
//!
//! The baselines live here too: prefix reuse, the two-pass full reuse, and a
//! CacheBlend-style selector whose mask runs through the same engine pass.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvTensor;
use crate::model::{math, Logits, Model};
use crate::store::{token_content_hash, CacheKey, KvCacheEntry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(Vec<u32>),
    /// A cached image: its store key and the encoder's token ids (needed
    /// whenever some of its tokens are recomputed).
    Image { key: CacheKey, tokens: Vec<u32> },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Text(t) => t.len(),
            Segment::Image { tokens, .. } => tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Segment::Image { .. })
    }

    pub fn tokens(&self) -> &[u32] {
        match self {
            Segment::Text(t) => t,
            Segment::Image { tokens, .. } => tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedPrompt {
    user: String,
    segments: Vec<Segment>,
    starts: Vec<usize>,
    len: usize,
}

impl SegmentedPrompt {
    pub fn new(user: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Validation("prompt has no segments".into()));
        }
        if let Some(i) = segments.iter().position(Segment::is_empty) {
            return Err(Error::Validation(format!("segment {i} is empty")));
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut len = 0;
        for s in &segments {
            starts.push(len);
            len += s.len();
        }
        Ok(Self {
            user: user.into(),
            segments,
            starts,
            len,
        })
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Global index of each segment's first token.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.segments.iter().flat_map(|s| s.tokens().iter().copied()).collect()
    }

    pub fn text_indices(&self) -> Vec<usize> {
        self.segments
            .iter()
            .zip(&self.starts)
            .filter(|(s, _)| !s.is_image())
            .flat_map(|(s, &start)| start..start + s.len())
            .collect()
    }

    /// `(segment index, global start, key, tokens)` for each image.
    pub fn images(&self) -> impl Iterator<Item = (usize, usize, &CacheKey, &[u32])> {
        self.segments
            .iter()
            .zip(&self.starts)
            .enumerate()
            .filter_map(|(i, (s, &start))| match s {
                Segment::Image { key, tokens } => Some((i, start, key, tokens.as_slice())),
                Segment::Text(_) => None,
            })
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// All text plus the first `k` tokens of each image.
    MpicK(usize),
    /// All text plus the `r`% of tokens whose layer-0 keys deviate most.
    CacheBlendR(f64),
    TextOnly,
    All,
    /// Marker for the prefix pipeline; selects nothing.
    PrefixOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    selected: Vec<usize>,
    policy: SelectionPolicy,
}

impl SelectionMask {
    /// Sorts and dedups `indices`.
    pub fn new(mut indices: Vec<usize>, policy: SelectionPolicy) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            selected: indices,
            policy,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn policy(&self) -> SelectionPolicy {
        self.policy
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.selected.iter().all(|&i| other.contains(i))
    }
}

/// How `k` in MPIC-k is counted when a prompt holds several images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KScope {
    /// The first `k` tokens of every image.
    #[default]
    PerImage,
    /// The first `k` image tokens of the prompt, across images in order.
    Global,
}

/// What happens to the rotary encoding of reused keys at link time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reposition {
    /// Keep the encoding from the precompute position.
    #[default]
    AsStored,
    /// Rotate reused keys by the offset between their new and old positions.
    Rerotate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkerConfig {
    #[serde(default)]
    pub k_scope: KScope,
    #[serde(default)]
    pub reposition: Reposition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotSource {
    /// Row `local` of the cached entry for prompt segment `segment`.
    Reused { segment: usize, local: usize },
    Dummy,
    Recomputed,
}

/// A full-prompt cache: reused rows, dummy rows, and where each came from.
#[derive(Clone, Debug)]
pub struct LinkedCache {
    pub kv: KvTensor,
    pub slots: Vec<SlotSource>,
}

impl LinkedCache {
    pub fn dummy_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == SlotSource::Dummy)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrefillStats {
    pub tokens_recomputed: usize,
    pub layers: usize,
    pub engine_passes: usize,
    pub wall_time: Duration,
    /// Prefix mode could not reuse its entry and recomputed everything.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct PrefillOutput {
    pub kv: KvTensor,
    pub logits: Logits,
    pub stats: PrefillStats,
}

pub struct Linker<'m> {
    model: &'m Model,
    config: LinkerConfig,
}

impl<'m> Linker<'m> {
    pub fn new(model: &'m Model, config: LinkerConfig) -> Self {
        Self { model, config }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn config(&self) -> LinkerConfig {
        self.config
    }

    /// Applies a static selection policy. The final prompt token is always
    /// selected for the MPIC/text-only policies since it produces the first
    /// output logits.
    pub fn select_tokens(&self, prompt: &SegmentedPrompt, policy: SelectionPolicy) -> Result<SelectionMask> {
        let n = prompt.len();
        let selected = match policy {
            SelectionPolicy::All => (0..n).collect(),
            SelectionPolicy::PrefixOnly => Vec::new(),
            SelectionPolicy::TextOnly => with_last(prompt.text_indices(), n),
            SelectionPolicy::MpicK(k) => {
                let mut idx = prompt.text_indices();
                match self.config.k_scope {
                    KScope::PerImage => {
                        for (_, start, _, tokens) in prompt.images() {
                            idx.extend(start..start + k.min(tokens.len()));
                        }
                    }
                    KScope::Global => {
                        let mut left = k;
                        for (_, start, _, tokens) in prompt.images() {
                            let take = left.min(tokens.len());
                            idx.extend(start..start + take);
                            left -= take;
                        }
                    }
                }
                with_last(idx, n)
            }
            SelectionPolicy::CacheBlendR(_) => {
                return Err(Error::Validation(
                    "CacheBlend selection needs the cached entries; use cacheblend_select".into(),
                ))
            }
        };
        Ok(SelectionMask::new(selected, policy))
    }

    /// Copies every image's cached rows into its global slots and leaves text
    /// slots zeroed. No attention math.
    pub fn assemble_linked_cache(&self, prompt: &SegmentedPrompt, fetched: &[KvCacheEntry]) -> Result<LinkedCache> {
        self.model.check_tokens(&prompt.tokens())?;
        let cfg = self.model.config();
        let by_key = index_entries(fetched);
        let mut kv = KvTensor::zeros(cfg.n_layers, prompt.len(), cfg.n_heads, cfg.head_dim);
        let mut slots = vec![SlotSource::Dummy; prompt.len()];
        for (seg, start, key, tokens) in prompt.images() {
            let entry = self.checked_entry(&by_key, key, tokens.len())?;
            for local in 0..tokens.len() {
                let slot = start + local;
                kv.copy_token_from(slot, &entry.kv, local);
                slots[slot] = SlotSource::Reused { segment: seg, local };
            }
            if self.config.reposition == Reposition::Rerotate {
                self.rerotate(&mut kv, start, tokens.len(), entry.position_base);
            }
        }
        Ok(LinkedCache { kv, slots })
    }

    /// Single engine pass over `mask` on top of `linked`.
    ///
    /// Requires every dummy slot and the final token to be selected. On return
    /// all selected slots hold recomputed K/V.
    pub fn selective_prefill(
        &self,
        prompt: &SegmentedPrompt,
        mask: &SelectionMask,
        linked: &mut LinkedCache,
    ) -> Result<(Logits, PrefillStats)> {
        let n = prompt.len();
        if linked.slots.len() != n || linked.kv.n_tokens() != n {
            return Err(Error::Validation(format!(
                "linked cache has {} slots for a {n}-token prompt",
                linked.slots.len()
            )));
        }
        if mask.selected().last().is_some_and(|&i| i >= n) {
            return Err(Error::Validation("mask index beyond prompt".into()));
        }
        if !mask.contains(n - 1) {
            return Err(Error::Contract("final prompt token is not selected".into()));
        }
        if let Some(d) = linked.dummy_slots().find(|&d| !mask.contains(d)) {
            return Err(Error::Contract(format!("dummy slot {d} is not selected")));
        }
        let tokens = prompt.tokens();
        let rows: Vec<u32> = mask.selected().iter().map(|&i| tokens[i]).collect();
        let started = Instant::now();
        let out = self
            .model
            .forward_rows(&mut linked.kv, &rows, mask.selected(), mask.selected(), None)?;
        for &i in mask.selected() {
            linked.slots[i] = SlotSource::Recomputed;
        }
        let stats = PrefillStats {
            tokens_recomputed: mask.len(),
            layers: self.model.config().n_layers,
            engine_passes: 1,
            wall_time: started.elapsed(),
            fallback: false,
        };
        Ok((out.logits, stats))
    }

    /// Convenience: assemble, then selective prefill.
    pub fn link_and_prefill(
        &self,
        prompt: &SegmentedPrompt,
        mask: &SelectionMask,
        fetched: &[KvCacheEntry],
    ) -> Result<PrefillOutput> {
        let started = Instant::now();
        let mut linked = self.assemble_linked_cache(prompt, fetched)?;
        let (logits, mut stats) = self.selective_prefill(prompt, mask, &mut linked)?;
        stats.wall_time = started.elapsed();
        Ok(PrefillOutput {
            kv: linked.kv,
            logits,
            stats,
        })
    }

    /// Two-pass full reuse: first the text KV (over the linked images), then
    /// the final token over the concatenation.
    pub fn full_reuse_prefill(&self, prompt: &SegmentedPrompt, fetched: &[KvCacheEntry]) -> Result<PrefillOutput> {
        let started = Instant::now();
        let mut linked = self.assemble_linked_cache(prompt, fetched)?;
        let n = prompt.len();
        let tokens = prompt.tokens();
        let text: Vec<usize> = prompt.text_indices().into_iter().filter(|&i| i != n - 1).collect();
        let mut passes = 0;
        if !text.is_empty() {
            let rows: Vec<u32> = text.iter().map(|&i| tokens[i]).collect();
            self.model.forward_rows(&mut linked.kv, &rows, &text, &text, None)?;
            passes += 1;
        }
        let last = [n - 1];
        let out = self
            .model
            .forward_rows(&mut linked.kv, &tokens[n - 1..], &last, &last, None)?;
        passes += 1;
        Ok(PrefillOutput {
            kv: linked.kv,
            logits: out.logits,
            stats: PrefillStats {
                tokens_recomputed: text.len() + 1,
                layers: self.model.config().n_layers,
                engine_passes: passes,
                wall_time: started.elapsed(),
                fallback: false,
            },
        })
    }

    /// Reuses `prefix` when it is the cache of an exact token prefix computed
    /// at position 0, and computes the rest on top. Otherwise recomputes the
    /// whole prompt.
    pub fn prefix_prefill(&self, tokens: &[u32], prefix: Option<&KvCacheEntry>) -> Result<PrefillOutput> {
        let started = Instant::now();
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Validation("cannot prefill an empty prompt".into()));
        }
        let reusable = prefix.filter(|p| {
            let len = p.token_count();
            p.key.model_fingerprint == self.model.fingerprint()
                && p.position_base == 0
                && len <= n
                && self.model.check_geometry(&p.kv).is_ok()
                && p.key.content_hash == token_content_hash(&tokens[..len])
        });
        let (kv, logits, recomputed, fallback) = match reusable {
            Some(p) => {
                let reuse = p.token_count().min(n - 1);
                let mut kv = if reuse == p.token_count() {
                    (*p.kv).clone()
                } else {
                    p.kv.slice_tokens(0, reuse)
                };
                let logits = self.model.extend(&mut kv, &tokens[reuse..])?;
                (kv, logits, n - reuse, false)
            }
            None => {
                let (kv, logits) = self.model.full_prefill(tokens)?;
                (kv, logits, n, prefix.is_some())
            }
        };
        Ok(PrefillOutput {
            kv,
            logits,
            stats: PrefillStats {
                tokens_recomputed: recomputed,
                layers: self.model.config().n_layers,
                engine_passes: 1,
                wall_time: started.elapsed(),
                fallback,
            },
        })
    }

    /// CacheBlend-style selection: recompute layer-0 keys of every cached
    /// token at its true position, rank cached tokens by L1 distance to the
    /// linked key (ties to the lowest index), and keep the top `ceil(r% * n)`
    /// plus all text and the final token.
    pub fn cacheblend_select(
        &self,
        prompt: &SegmentedPrompt,
        fetched: &[KvCacheEntry],
        r: f64,
    ) -> Result<SelectionMask> {
        if !(0.0..=100.0).contains(&r) {
            return Err(Error::Validation(format!("recompute ratio {r} outside [0, 100]")));
        }
        let n = prompt.len();
        let by_key = index_entries(fetched);
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for (_, start, key, tokens) in prompt.images() {
            let entry = self.checked_entry(&by_key, key, tokens.len())?;
            let positions: Vec<usize> = (start..start + tokens.len()).collect();
            let fresh = self.model.layer0_keys(tokens, &positions)?;
            let w = entry.kv.width();
            let mut stored = entry.kv.keys(0).to_vec();
            if self.config.reposition == Reposition::Rerotate {
                for local in 0..tokens.len() {
                    let delta = (start + local) as f64 - (entry.position_base + local) as f64;
                    self.rotate_row(&mut stored[local * w..(local + 1) * w], delta);
                }
            }
            for local in 0..tokens.len() {
                let row = local * w..(local + 1) * w;
                let dist: f64 = stored[row.clone()]
                    .iter()
                    .zip(&fresh[row])
                    .map(|(a, b)| (*a as f64 - *b as f64).abs())
                    .sum();
                scored.push((dist, start + local));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let budget = ((r * n as f64) / 100.0).ceil() as usize;
        let mut idx = prompt.text_indices();
        idx.extend(scored.iter().take(budget).map(|&(_, i)| i));
        Ok(SelectionMask::new(with_last(idx, n), SelectionPolicy::CacheBlendR(r)))
    }

    /// Links a cached segment after the current end of `cache` (mid-decode
    /// retrieval). Returns the global position of its first token.
    pub fn append_entry(&self, cache: &mut KvTensor, entry: &KvCacheEntry) -> Result<usize> {
        self.check_entry(entry, entry.token_count())?;
        self.model.check_geometry(cache)?;
        let start = cache.n_tokens();
        let count = entry.token_count();
        cache.grow(count);
        for local in 0..count {
            cache.copy_token_from(start + local, &entry.kv, local);
        }
        if self.config.reposition == Reposition::Rerotate {
            self.rerotate(cache, start, count, entry.position_base);
        }
        Ok(start)
    }

    fn checked_entry<'e>(
        &self,
        by_key: &HashMap<&CacheKey, &'e KvCacheEntry>,
        key: &CacheKey,
        len: usize,
    ) -> Result<&'e KvCacheEntry> {
        let entry = by_key
            .get(key)
            .ok_or_else(|| Error::Link(format!("no fetched entry for {key}")))?;
        self.check_entry(entry, len)?;
        Ok(entry)
    }

    fn check_entry(&self, entry: &KvCacheEntry, len: usize) -> Result<()> {
        if entry.key.model_fingerprint != self.model.fingerprint() {
            return Err(Error::Link(format!(
                "entry {} was computed by model {:016x}, not {:016x}",
                entry.key,
                entry.key.model_fingerprint,
                self.model.fingerprint()
            )));
        }
        if entry.token_count() != len {
            return Err(Error::Link(format!(
                "entry {} holds {} tokens, segment has {len}",
                entry.key,
                entry.token_count()
            )));
        }
        self.model
            .check_geometry(&entry.kv)
            .map_err(|e| Error::Link(e.to_string()))
    }

    fn rerotate(&self, kv: &mut KvTensor, start: usize, len: usize, base: usize) {
        for local in 0..len {
            let delta = (start + local) as f64 - (base + local) as f64;
            for layer in 0..kv.n_layers() {
                self.rotate_row(kv.key_row_mut(layer, start + local), delta);
            }
        }
    }

    fn rotate_row(&self, row: &mut [f32], delta: f64) {
        if delta != 0.0 {
            let cfg = self.model.config();
            math::rope_row(row, cfg.head_dim, delta, cfg.rope_base);
        }
    }
}

fn index_entries(fetched: &[KvCacheEntry]) -> HashMap<&CacheKey, &KvCacheEntry> {
    fetched.iter().map(|e| (&e.key, e)).collect()
}

fn with_last(mut idx: Vec<usize>, n: usize) -> Vec<usize> {
    if n > 0 {
        idx.push(n - 1);
    }
    idx
}
