//! Load-or-compute preparation of the segment caches a request needs.
//!
//! Hits are fetched by loader lanes while compute lanes prefill the misses.
//! A load that fails (injected fault, corrupt file, expiry race, deadline) is
//! handed to the compute lanes instead, so the caller always gets a complete
//! set of entries.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::{CacheKey, CacheStore, KvCacheEntry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareItem {
    pub key: CacheKey,
    /// Segment tokens, used when the cache has to be computed.
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareRequest {
    pub items: Vec<PrepareItem>,
    /// Hits not loaded by then are recomputed instead.
    pub deadline: Option<Duration>,
}

#[derive(Clone, Debug, Default)]
pub struct PrepareReport {
    pub entries: BTreeMap<CacheKey, KvCacheEntry>,
    pub loaded: usize,
    /// Includes fallbacks.
    pub computed: usize,
    pub fallbacks: usize,
    pub wall_time: Duration,
}

/// Deterministic load failures for testing the fallback path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    /// Each key fails independently with this probability, decided by a
    /// hash of `seed` and the key so that reruns fail the same keys.
    pub probability: f64,
    #[serde(skip)]
    pub failing_keys: BTreeSet<CacheKey>,
    pub seed: u64,
}

impl FaultInjection {
    pub fn fails(&self, key: &CacheKey) -> bool {
        if self.failing_keys.contains(key) {
            return true;
        }
        if self.probability <= 0.0 {
            return false;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(key.content_hash);
        h.update(key.model_fingerprint.to_le_bytes());
        h.update(key.namespace.as_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        (x as f64 / u64::MAX as f64) < self.probability
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub load_lanes: usize,
    pub compute_lanes: usize,
    #[serde(skip)]
    pub fault: Option<FaultInjection>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            load_lanes: 1,
            compute_lanes: 1,
            fault: None,
        }
    }
}

enum Outcome {
    Loaded(KvCacheEntry),
    Computed(KvCacheEntry, bool),
}

struct Plan {
    hits: Vec<PrepareItem>,
    misses: Vec<PrepareItem>,
}

fn plan(req: &PrepareRequest, store: &CacheStore, model: &Model) -> Result<Plan> {
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for item in &req.items {
        if item.key.model_fingerprint != model.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: model.fingerprint(),
                found: item.key.model_fingerprint,
            });
        }
        if item.tokens.is_empty() {
            return Err(Error::Unresolvable(item.key.clone()));
        }
        model.check_tokens(&item.tokens)?;
        if seen.insert(item.key.clone()) {
            items.push(item.clone());
        }
    }
    let keys: Vec<CacheKey> = items.iter().map(|i| i.key.clone()).collect();
    let report = store.lookup_many(&keys);
    let hit_keys: BTreeSet<&CacheKey> = report.hits.iter().map(|(k, _)| k).collect();
    let (hits, misses) = items.into_iter().partition(|i| hit_keys.contains(&i.key));
    Ok(Plan { hits, misses })
}

/// Fetches a hit, or `None` when it has to be recomputed.
fn try_load(
    item: &PrepareItem,
    store: &CacheStore,
    model: &Model,
    config: &TransferConfig,
    started: Instant,
    deadline: Option<Duration>,
) -> Option<KvCacheEntry> {
    if deadline.is_some_and(|d| started.elapsed() > d) {
        return None;
    }
    if config.fault.as_ref().is_some_and(|f| f.fails(&item.key)) {
        return None;
    }
    let entry = store.fetch(&item.key).ok()?;
    let usable = entry.token_count() == item.tokens.len() && model.check_geometry(&entry.kv).is_ok();
    usable.then_some(entry)
}

fn compute(item: &PrepareItem, store: &CacheStore, model: &Model) -> Result<KvCacheEntry> {
    let (kv, _) = model.prefill_at(&item.tokens, 0)?;
    let entry = store.new_entry(item.key.clone(), Arc::new(kv), 0);
    store.put(entry.clone())?;
    Ok(entry)
}

fn finish(outcomes: Vec<Outcome>, started: Instant) -> PrepareReport {
    let mut report = PrepareReport::default();
    for outcome in outcomes {
        let entry = match outcome {
            Outcome::Loaded(e) => {
                report.loaded += 1;
                e
            }
            Outcome::Computed(e, fallback) => {
                report.computed += 1;
                report.fallbacks += usize::from(fallback);
                e
            }
        };
        report.entries.insert(entry.key.clone(), entry);
    }
    report.wall_time = started.elapsed();
    report
}

/// Loads hits and computes misses concurrently. Computed entries are stored.
pub fn prepare(req: &PrepareRequest, store: &CacheStore, model: &Model, config: &TransferConfig) -> Result<PrepareReport> {
    let started = Instant::now();
    let Plan { hits, misses } = plan(req, store, model)?;
    if hits.is_empty() && misses.is_empty() {
        return Ok(finish(Vec::new(), started));
    }

    let (load_tx, load_rx) = unbounded::<PrepareItem>();
    let (compute_tx, compute_rx) = unbounded::<(PrepareItem, bool)>();
    for item in hits {
        load_tx.send(item).expect("receiver alive");
    }
    drop(load_tx);
    for item in misses {
        compute_tx.send((item, false)).expect("receiver alive");
    }

    let outcomes = Mutex::new(Vec::new());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    thread::scope(|s| {
        for _ in 0..config.load_lanes.max(1) {
            let (rx, tx) = (load_rx.clone(), compute_tx.clone());
            let outcomes = &outcomes;
            s.spawn(move || {
                for item in rx {
                    match try_load(&item, store, model, config, started, req.deadline) {
                        Some(entry) => outcomes.lock().push(Outcome::Loaded(entry)),
                        None => tx.send((item, true)).expect("compute lanes alive"),
                    }
                }
            });
        }
        // compute lanes stop once every loader has dropped its sender
        drop(compute_tx);
        for _ in 0..config.compute_lanes.max(1) {
            let rx = compute_rx.clone();
            let (outcomes, first_error) = (&outcomes, &first_error);
            s.spawn(move || {
                for (item, fallback) in rx {
                    match compute(&item, store, model) {
                        Ok(entry) => outcomes.lock().push(Outcome::Computed(entry, fallback)),
                        Err(e) => {
                            first_error.lock().get_or_insert(e);
                        }
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner() {
        return Err(e);
    }
    Ok(finish(outcomes.into_inner(), started))
}

/// Serial reference for [`prepare`]: the same decisions, one item at a time.
pub fn prepare_sequential(
    req: &PrepareRequest,
    store: &CacheStore,
    model: &Model,
    config: &TransferConfig,
) -> Result<PrepareReport> {
    let started = Instant::now();
    let Plan { hits, misses } = plan(req, store, model)?;
    let mut outcomes = Vec::new();
    let mut fallbacks = Vec::new();
    for item in hits {
        match try_load(&item, store, model, config, started, req.deadline) {
            Some(entry) => outcomes.push(Outcome::Loaded(entry)),
            None => fallbacks.push(item),
        }
    }
    for item in misses {
        outcomes.push(Outcome::Computed(compute(&item, store, model)?, false));
    }
    for item in fallbacks {
        outcomes.push(Outcome::Computed(compute(&item, store, model)?, true));
    }
    Ok(finish(outcomes, started))
}
