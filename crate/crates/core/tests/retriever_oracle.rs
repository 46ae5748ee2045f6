use std::sync::Arc;
use std::thread;

use mpic_core::retriever::{RetrievalQuery, Retriever};
use mpic_core::store::CacheKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(index: &[(CacheKey, Vec<f32>)], q: &[f32], k: usize) -> Vec<CacheKey> {
    let mut scored: Vec<(f64, CacheKey)> = index
        .iter()
        .map(|(key, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
            let na: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            (cos, key.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, k)| k).collect()
}

#[test]
fn ranking_matches_exhaustive_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &size in &[0usize, 1, 3, 50, 2000] {
        let r = Retriever::new(8);
        let mut index = Vec::new();
        for i in 0..size {
            let key = CacheKey::for_bytes(&(i as u64).to_le_bytes(), 5, "dynamic");
            // small integer grid so exact ties occur
            let v: Vec<f32> = (0..8).map(|_| rng.gen_range(-2..=2) as f32).collect();
            r.index(key.clone(), v.clone()).unwrap();
            index.push((key, v));
        }
        for _ in 0..20 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-2..=2) as f32).collect();
            let k = rng.gen_range(1..=10);
            let got: Vec<CacheKey> = r
                .retrieve(&RetrievalQuery { embedding: q.clone(), top_k: k })
                .unwrap()
                .into_iter()
                .map(|h| h.key)
                .collect();
            assert_eq!(got, brute_force(&index, &q, k));
        }
    }
}

#[test]
fn concurrent_readers_see_whole_snapshots() {
    let r = Arc::new(Retriever::new(2));
    thread::scope(|s| {
        let writer = r.clone();
        s.spawn(move || {
            for i in 0..200u32 {
                writer
                    .index(CacheKey::for_bytes(&i.to_le_bytes(), 1, "d"), vec![1.0, i as f32])
                    .unwrap();
            }
        });
        for _ in 0..4 {
            let reader = r.clone();
            s.spawn(move || {
                let mut last = 0;
                for _ in 0..200 {
                    let n = reader
                        .retrieve(&RetrievalQuery { embedding: vec![1.0, 0.0], top_k: 1000 })
                        .unwrap()
                        .len();
                    assert!(n >= last);
                    last = n;
                }
            });
        }
    });
    assert_eq!(r.len(), 200);
}
