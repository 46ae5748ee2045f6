#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, SystemTime};

use mpic_core::linker::{Segment, SegmentedPrompt};
use mpic_core::model::{Model, ModelConfig};
use mpic_core::store::{CacheKey, KvCacheEntry};
use rand::Rng;

pub fn small_model() -> Model {
    Model::build(ModelConfig::new(2, 2, 8, 64, 6, 4242)).unwrap()
}

/// Cache entry for `tokens` precomputed on their own at position 0.
pub fn image_entry(model: &Model, name: &str, tokens: &[u32]) -> KvCacheEntry {
    let key = CacheKey::for_bytes(name.as_bytes(), model.fingerprint(), "test");
    let (kv, _) = model.full_prefill(tokens).unwrap();
    KvCacheEntry::new(key, Arc::new(kv), 0, SystemTime::now(), Duration::from_secs(3600))
}

pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Random interleaving of text and image segments with at most `max_n`
/// tokens in total.
pub fn random_prompt(rng: &mut impl Rng, model: &Model, max_n: usize) -> (SegmentedPrompt, Vec<KvCacheEntry>) {
    let vocab = model.config().vocab_size;
    let n_segments = rng.gen_range(1..=5);
    let mut segments = Vec::new();
    let mut entries = Vec::new();
    let mut total = 0;
    for i in 0..n_segments {
        let left = max_n - total;
        if left == 0 {
            break;
        }
        let len = rng.gen_range(1..=left.min(16));
        let tokens = random_tokens(rng, vocab, len);
        if rng.gen_bool(0.5) {
            let entry = image_entry(model, &format!("img-{i}-{}", rng.gen::<u64>()), &tokens);
            segments.push(Segment::Image {
                key: entry.key.clone(),
                tokens,
            });
            entries.push(entry);
        } else {
            segments.push(Segment::Text(tokens));
        }
        total += len;
    }
    (SegmentedPrompt::new("test", segments).unwrap(), entries)
}
