mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{image, mixed, request, small_config};
use mpic_core::store::{CacheKey, ManualClock, DYNAMIC_NAMESPACE};
use mpic_serving::request::{Mode, SegmentSource};
use mpic_serving::{tokenizer, Engine};

fn engine_with_images() -> (Engine, Vec<String>) {
    let engine = Engine::new(small_config()).unwrap();
    let ids = (0..2).map(|i| engine.put_image("alice", image(i)).unwrap()).collect();
    (engine, ids)
}

#[test]
fn full_recompute_matches_nocache() {
    let (engine, ids) = engine_with_images();
    let base = engine.handle(&request("alice", Mode::NoCache, mixed(&ids), 6)).unwrap();
    // k covering every image token selects the whole prompt.
    let all = engine.handle(&request("alice", Mode::Mpic(Some(1000)), mixed(&ids), 6)).unwrap();
    assert_eq!(base.output_ids, all.output_ids);
    let max = base
        .first_logits
        .iter()
        .zip(&all.first_logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max <= 1e-5, "{max}");
    assert_eq!(all.record.prefill_tokens_recomputed, all.record.prompt_tokens);
}

#[test]
fn mpic_zero_matches_full_reuse() {
    let (engine, ids) = engine_with_images();
    let a = engine.handle(&request("alice", Mode::Mpic(Some(0)), mixed(&ids), 6)).unwrap();
    let b = engine.handle(&request("alice", Mode::FullReuse, mixed(&ids), 6)).unwrap();
    assert_eq!(a.text, b.text);
    assert_eq!(a.prepare.unwrap().loaded, 2);
    let text_tokens = a.record.prompt_tokens - 2 * small_config().model.image_token_count;
    assert_eq!(a.record.prefill_tokens_recomputed, text_tokens);
}

#[test]
fn expired_cache_with_inline_bytes_is_recomputed() {
    let clock = Arc::new(ManualClock::default());
    let mut config = small_config();
    config.cache.ttl_seconds = 1;
    let engine = Engine::with_clock(config, clock.clone()).unwrap();
    let id = engine.put_image("bob", image(5)).unwrap();
    clock.advance(Duration::from_millis(1500));
    let segments = vec![SegmentSource::text("see "), SegmentSource::inline(&image(5))];
    let resp = engine.handle(&request("bob", Mode::Mpic(None), segments, 2)).unwrap();
    let p = resp.prepare.unwrap();
    assert_eq!((p.loaded, p.computed), (0, 1));
    // The recomputed cache was stored again under the same id.
    let listed = engine.list(Some("bob"));
    assert!(listed.iter().any(|e| e.cache_id == id));
}

#[test]
fn request_errors() {
    let (engine, ids) = engine_with_images();
    let missing = vec![SegmentSource::cached("00".repeat(32))];
    assert!(engine.handle(&request("alice", Mode::NoCache, missing, 1)).is_err());
    // Another user's image is not visible.
    assert!(engine.handle(&request("carol", Mode::NoCache, mixed(&ids), 1)).is_err());
    assert!(engine.handle(&request("alice", Mode::NoCache, mixed(&ids), 0)).is_err());
    assert!(engine.handle(&request("alice", Mode::NoCache, vec![], 1)).is_err());
    let SegmentSource::Image { data, .. } = SegmentSource::inline(&image(7)) else {
        unreachable!()
    };
    let wrong = vec![SegmentSource::Image {
        cache_id: Some(ids[0].clone()),
        data,
    }];
    assert!(engine.handle(&request("alice", Mode::NoCache, wrong, 1)).is_err());
}

#[test]
fn prefix_mode_reuses_and_stays_exact() {
    let (engine, ids) = engine_with_images();
    let mut segs = mixed(&ids);
    let first = engine.handle(&request("alice", Mode::Prefix, segs.clone(), 3)).unwrap();
    assert_eq!(first.record.prefill_tokens_recomputed, first.record.prompt_tokens);
    // Same documents, different question: the prompt up to the question is reused.
    *segs.last_mut().unwrap() = SegmentSource::text(" and summarise.");
    let second = engine.handle(&request("alice", Mode::Prefix, segs.clone(), 3)).unwrap();
    assert_eq!(second.record.prefill_tokens_recomputed, tokenizer::encode(" and summarise.").len());
    let reference = engine.handle(&request("alice", Mode::NoCache, segs.clone(), 3)).unwrap();
    assert_eq!(second.output_ids, reference.output_ids);
    let max = second
        .first_logits
        .iter()
        .zip(&reference.first_logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max <= 1e-6, "{max}");
    // A different first token shares nothing.
    segs[0] = SegmentSource::text("Contrast ");
    let diverged = engine.handle(&request("alice", Mode::Prefix, segs, 3)).unwrap();
    assert_eq!(diverged.record.prefill_tokens_recomputed, diverged.record.prompt_tokens);
}

#[test]
fn outputs_are_deterministic_across_engines() {
    for mode in [Mode::Mpic(Some(4)), Mode::CacheBlend(Some(30.0)), Mode::Prefix, Mode::FullReuse, Mode::NoCache] {
        let (a, ids) = engine_with_images();
        let (b, _) = engine_with_images();
        let ra = a.handle(&request("alice", mode, mixed(&ids), 5)).unwrap();
        let rb = b.handle(&request("alice", mode, mixed(&ids), 5)).unwrap();
        assert_eq!(ra.output_ids, rb.output_ids, "{mode}");
        assert_eq!(ra.first_logits, rb.first_logits, "{mode}");
        assert!(ra.record.ttft_s >= ra.record.queue_s);
        assert_eq!(ra.record.output_tokens, 5);
    }
}

#[test]
fn sentinel_output_links_the_best_reference() {
    let config = small_config();
    let segments = vec![SegmentSource::text("what does the reference show?")];
    // Pick the sentinel to be the token this prompt emits first.
    let probe = Engine::new(config.clone()).unwrap();
    let first = probe.handle(&request("alice", Mode::NoCache, segments.clone(), 1)).unwrap().output_ids[0];
    let mut config = config;
    config.serving.sentinel = Some(first);
    let engine = Engine::new(config).unwrap();
    let refs: Vec<Vec<u8>> = (20..24).map(image).collect();
    let ids: Vec<String> = refs.iter().map(|b| engine.add_dynamic(b.clone()).unwrap()).collect();

    let resp = engine.handle(&request("alice", Mode::NoCache, segments, 2)).unwrap();

    // Brute-force oracle: cosine over every reference, then decode the
    // sentinel after appending the winner's cache.
    let model = engine.model();
    let text = tokenizer::encode("what does the reference show?");
    let q = model.embed_mean(&text).unwrap();
    let cos = |e: &[f32]| {
        let dot: f64 = q.iter().zip(e).map(|(a, b)| *a as f64 * *b as f64).sum();
        let n = |v: &[f32]| v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
        dot / (n(&q) * n(e))
    };
    let mut ranked: Vec<(f64, CacheKey, usize)> = refs
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let emb = model.embed_mean(&model.encode_image(b).unwrap().into_inner()).unwrap();
            (cos(&emb), CacheKey::for_bytes(b, model.fingerprint(), DYNAMIC_NAMESPACE), i)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let best = ranked[0].2;
    assert_eq!(resp.retrieved, vec![ids[best].clone()]);

    let (mut kv, logits) = model.full_prefill(&text).unwrap();
    assert_eq!(logits.argmax(), first);
    let (reference, _) = model.prefill_at(&model.encode_image(&refs[best]).unwrap().into_inner(), 0).unwrap();
    let at = kv.n_tokens();
    kv.grow(reference.n_tokens());
    for t in 0..reference.n_tokens() {
        kv.copy_token_from(at + t, &reference, t);
    }
    let pos = kv.n_tokens();
    let next = model.decode_step(&mut kv, first, pos).unwrap().argmax();
    assert_eq!(resp.output_ids, vec![first, next]);
}

#[test]
fn dynamic_library_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.cache.disk_dir = Some(dir.path().to_path_buf());
    let id = {
        let engine = Engine::new(config.clone()).unwrap();
        engine.put_image("alice", image(1)).unwrap();
        engine.add_dynamic(image(2)).unwrap()
    };
    let engine = Engine::new(config).unwrap();
    assert_eq!(engine.retriever().len(), 1);
    assert!(engine.list(Some(DYNAMIC_NAMESPACE)).iter().any(|e| e.cache_id == id));
    let segs = vec![SegmentSource::cached(mpic_serving::library::image_id(&image(1)))];
    let resp = engine.handle(&request("alice", Mode::Mpic(None), segs, 1)).unwrap();
    assert_eq!(resp.prepare.unwrap().loaded, 1);
    assert!(engine.remove_image("alice", &mpic_serving::library::image_id(&image(1))).unwrap());
}
