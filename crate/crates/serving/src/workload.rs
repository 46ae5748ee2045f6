//! Synthetic workloads: seeded image bytes, filler text and request
//! datasets, plus loading request files from a directory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::request::{Mode, Request, SegmentSource};

/// Deterministic stand-in for an uploaded image file.
pub fn image_bytes(seed: u64, index: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut bytes = vec![0u8; 64];
    rng.fill(&mut bytes[..]);
    bytes
}

/// `len` printable ASCII characters; one token each under the byte tokenizer.
pub fn random_text(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| {
            let c = rng.gen_range(0..27u8);
            if c == 26 { ' ' } else { char::from(b'a' + c) }
        })
        .collect()
}

/// Uploads `count` synthetic images to `user`'s library and returns their ids.
pub fn install_images(engine: &Engine, user: &str, count: usize, seed: u64) -> Result<Vec<String>> {
    (0..count).map(|i| engine.put_image(user, image_bytes(seed, i))).collect()
}

/// Images first, then the question text.
pub fn image_request(user: &str, image_ids: &[String], text: String, mode: Mode, max_tokens: usize) -> Request {
    let mut segments: Vec<SegmentSource> = image_ids.iter().map(|id| SegmentSource::cached(id.clone())).collect();
    segments.push(SegmentSource::text(text));
    Request {
        request_id: String::new(),
        user: user.to_string(),
        mode,
        segments,
        max_tokens,
    }
}

/// One request per image count `1..=max_images`, each asking about the first
/// `n` of `image_ids` with `text_tokens` characters of text.
pub fn image_count_sweep(
    user: &str,
    image_ids: &[String],
    max_images: usize,
    text_tokens: usize,
    max_tokens: usize,
    seed: u64,
) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=max_images.min(image_ids.len()))
        .map(|n| {
            let mut r = image_request(user, &image_ids[..n], random_text(&mut rng, text_tokens), Mode::NoCache, max_tokens);
            r.request_id = format!("sweep-{n}");
            r
        })
        .collect()
}

/// Reads every `*.json` request in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Request>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let mut req: Request = serde_json::from_slice(&std::fs::read(&p)?)?;
        if req.request_id.is_empty() {
            req.request_id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        out.push(req);
    }
    if out.is_empty() {
        return Err(Error::Request(format!("no request files in {}", dir.display())));
    }
    Ok(out)
}
