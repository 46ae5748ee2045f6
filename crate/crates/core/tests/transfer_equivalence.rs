mod common;

use common::{random_prompt, random_tokens, small_model};
use mpic_core::linker::{Linker, LinkerConfig, SegmentedPrompt, SelectionPolicy};
use mpic_core::model::Model;
use mpic_core::store::{format, CacheKey, CacheStore, KvCacheEntry, StoreConfig, Tier};
use mpic_core::transfer::{prepare, prepare_sequential, FaultInjection, PrepareItem, PrepareRequest, TransferConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn disk_store(dir: &std::path::Path) -> CacheStore {
    CacheStore::new(StoreConfig {
        disk_dir: Some(dir.to_path_buf()),
        ..StoreConfig::default()
    })
    .unwrap()
}

fn items(model: &Model, rng: &mut ChaCha8Rng, count: usize) -> Vec<PrepareItem> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..12);
            let tokens = random_tokens(rng, model.config().vocab_size, len);
            PrepareItem {
                key: CacheKey::for_tokens(&tokens, model.fingerprint(), "t"),
                tokens,
            }
        })
        .collect()
}

fn seed_store(store: &CacheStore, model: &Model, warm: &[PrepareItem], tiers: &[Tier]) {
    for (item, &tier) in warm.iter().zip(tiers) {
        let (kv, _) = model.full_prefill(&item.tokens).unwrap();
        store
            .put(store.new_entry(item.key.clone(), std::sync::Arc::new(kv), 0))
            .unwrap();
        store.place(&item.key, tier).unwrap();
    }
}

fn bytes(report: &mpic_core::transfer::PrepareReport) -> Vec<(CacheKey, Vec<u8>)> {
    report
        .entries
        .iter()
        .map(|(k, e)| (k.clone(), format::serialize(e).unwrap()))
        .collect()
}

#[test]
fn parallel_matches_sequential_with_random_tiers() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for round in 0..60 {
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (a, b) = (disk_store(da.path()), disk_store(db.path()));
        let count = rng.gen_range(0..8);
        let all = items(&m, &mut rng, count);
        let warm: Vec<PrepareItem> = all.iter().filter(|_| rng.gen_bool(0.6)).cloned().collect();
        let tiers: Vec<Tier> = warm
            .iter()
            .map(|_| [Tier::Device, Tier::Host, Tier::Disk][rng.gen_range(0..3)])
            .collect();
        seed_store(&a, &m, &warm, &tiers);
        seed_store(&b, &m, &warm, &tiers);
        let fault = (round % 2 == 1).then(|| FaultInjection {
            probability: 0.5,
            seed: round,
            ..FaultInjection::default()
        });
        let cfg = TransferConfig {
            load_lanes: rng.gen_range(1..4),
            compute_lanes: rng.gen_range(1..4),
            fault,
        };
        let req = PrepareRequest {
            items: all,
            deadline: None,
        };
        let par = prepare(&req, &a, &m, &cfg).unwrap();
        let seq = prepare_sequential(&req, &b, &m, &cfg).unwrap();
        assert_eq!(bytes(&par), bytes(&seq));
        assert_eq!((par.loaded, par.computed, par.fallbacks), (seq.loaded, seq.computed, seq.fallbacks));
        assert_eq!(par.loaded + par.computed, par.entries.len());
    }
}

fn prepared_logits(
    m: &Model,
    prompt: &SegmentedPrompt,
    store: &CacheStore,
    cfg: &TransferConfig,
) -> (mpic_core::model::Logits, usize) {
    let req = PrepareRequest {
        items: prompt
            .images()
            .map(|(_, _, key, tokens)| PrepareItem {
                key: key.clone(),
                tokens: tokens.to_vec(),
            })
            .collect(),
        deadline: None,
    };
    let report = prepare(&req, store, m, cfg).unwrap();
    let fetched: Vec<KvCacheEntry> = report.entries.into_values().collect();
    let l = Linker::new(m, LinkerConfig::default());
    let mask = l.select_tokens(prompt, SelectionPolicy::MpicK(3)).unwrap();
    (l.link_and_prefill(prompt, &mask, &fetched).unwrap().logits, report.fallbacks)
}

#[test]
fn failed_loads_give_the_compute_everything_result() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut total_fallbacks = 0;
    for round in 0..30 {
        let (prompt, entries) = random_prompt(&mut rng, &m, 64);
        let warm = CacheStore::new(StoreConfig::default()).unwrap();
        for e in entries {
            warm.put(e).unwrap();
        }
        let faulty = TransferConfig {
            fault: Some(FaultInjection {
                probability: 0.5,
                seed: round,
                ..FaultInjection::default()
            }),
            ..TransferConfig::default()
        };
        let (got, fallbacks) = prepared_logits(&m, &prompt, &warm, &faulty);
        total_fallbacks += fallbacks;
        let cold = CacheStore::new(StoreConfig::default()).unwrap();
        let (want, _) = prepared_logits(&m, &prompt, &cold, &TransferConfig::default());
        assert!(got.max_abs_diff(&want) <= 1e-5);
    }
    assert!(total_fallbacks > 0);
}
