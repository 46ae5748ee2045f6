//! Content-addressed KV cache storage across Device, Host and Disk tiers.
//!
//! Entries are keyed by the hash of the segment's raw bytes, the model
//! fingerprint and the owning namespace (a user id, or [`DYNAMIC_NAMESPACE`]
//! for the shared reference library). Device and Host are bounded in-process
//! tiers; when a tier is over budget its least-recently-fetched entries move
//! down one tier. Disk holds one [`format`] file per entry plus a JSON sidecar
//! with the metadata the binary header does not carry.

mod clock;
pub mod format;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvTensor;

pub use clock::{Clock, ManualClock, SystemClock};

/// Namespace of the shared retrieval library.
pub const DYNAMIC_NAMESPACE: &str = "dynamic";

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub content_hash: [u8; 32],
    pub model_fingerprint: u64,
    pub namespace: String,
}

impl CacheKey {
    pub fn for_bytes(bytes: &[u8], model_fingerprint: u64, namespace: impl Into<String>) -> Self {
        Self {
            content_hash: content_hash(bytes),
            model_fingerprint,
            namespace: namespace.into(),
        }
    }

    /// Key for a token-level prefix (prefix caching).
    pub fn for_tokens(tokens: &[u32], model_fingerprint: u64, namespace: impl Into<String>) -> Self {
        Self {
            content_hash: token_content_hash(tokens),
            model_fingerprint,
            namespace: namespace.into(),
        }
    }

    pub fn namespace_hash(&self) -> u64 {
        let d = Sha256::digest(self.namespace.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Hex content hash; what users pass around as a `cache_id`.
    pub fn cache_id(&self) -> String {
        hex::encode(self.content_hash)
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CacheKey({}/{:016x}/{})",
            self.namespace,
            self.model_fingerprint,
            &self.cache_id()[..16]
        )
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.cache_id())
    }
}

pub fn content_hash(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn token_content_hash(tokens: &[u32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Device,
    Host,
    Disk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheEntry {
    pub key: CacheKey,
    pub kv: Arc<KvTensor>,
    /// Position of the segment's first token when the cache was computed.
    pub position_base: usize,
    pub created_at: SystemTime,
    pub ttl: Duration,
    pub tier: Tier,
    /// Retrieval embedding, for dynamic-library entries.
    pub embedding: Option<Vec<f32>>,
}

impl KvCacheEntry {
    pub fn new(
        key: CacheKey,
        kv: Arc<KvTensor>,
        position_base: usize,
        created_at: SystemTime,
        ttl: Duration,
    ) -> Self {
        Self {
            key,
            kv,
            position_base,
            created_at,
            ttl,
            tier: Tier::Device,
            embedding: None,
        }
    }

    pub fn token_count(&self) -> usize {
        self.kv.n_tokens()
    }

    pub fn is_expired(&self, now: SystemTime) -> bool {
        expired(self.created_at, self.ttl, now)
    }

    /// Same key, position base and KV bytes.
    pub fn same_payload(&self, other: &KvCacheEntry) -> bool {
        self.key == other.key && self.position_base == other.position_base && self.kv.bit_eq(&other.kv)
    }
}

fn expired(created_at: SystemTime, ttl: Duration, now: SystemTime) -> bool {
    match created_at.checked_add(ttl) {
        Some(deadline) => deadline <= now,
        None => false,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LookupReport {
    pub hits: Vec<(CacheKey, Tier)>,
    pub misses: Vec<CacheKey>,
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    /// Maximum entries resident on the Device tier.
    pub device_budget: usize,
    /// Maximum entries resident on the Host tier.
    pub host_budget: usize,
    /// Backing directory for the Disk tier; without one, entries pushed out
    /// of Host are dropped.
    pub disk_dir: Option<PathBuf>,
    pub default_ttl: Duration,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            device_budget: 64,
            host_budget: 256,
            disk_dir: None,
            default_ttl: Duration::from_secs(24 * 3600),
        }
    }
}

/// Listing row for `cache ls`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryInfo {
    pub namespace: String,
    pub cache_id: String,
    pub tier: Tier,
    pub token_count: usize,
    pub position_base: usize,
    pub expires_in_secs: f64,
}

#[derive(Clone, Debug)]
struct Meta {
    position_base: usize,
    token_count: usize,
    created_at: SystemTime,
    ttl: Duration,
    embedding: Option<Vec<f32>>,
}

#[derive(Debug)]
struct Slot {
    meta: Meta,
    tier: Tier,
    /// Present on Device and Host; `None` when only on disk.
    kv: Option<Arc<KvTensor>>,
    /// A file for this entry exists on disk.
    persisted: bool,
    last_touch: u64,
}

#[derive(Default)]
struct Inner {
    slots: HashMap<CacheKey, Slot>,
    tick: u64,
    device_budget: usize,
    host_budget: usize,
}

impl Inner {
    fn touch(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    namespace: String,
    created_at_ms: u64,
    ttl_ms: u64,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
}

pub struct CacheStore {
    config: StoreConfig,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl fmt::Debug for CacheStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CacheStore")
            .field("config", &self.config)
            .field("entries", &self.inner.lock().slots.len())
            .finish()
    }
}

impl CacheStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    /// Opens the store, indexing any entries already present in `disk_dir`.
    pub fn with_clock(config: StoreConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let mut inner = Inner {
            device_budget: config.device_budget,
            host_budget: config.host_budget,
            ..Inner::default()
        };
        if let Some(dir) = &config.disk_dir {
            fs::create_dir_all(dir)?;
            scan_disk(dir, &mut inner)?;
        }
        Ok(Self {
            config,
            clock,
            inner: Mutex::new(inner),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn now(&self) -> SystemTime {
        self.clock.now()
    }

    /// Builds an entry stamped with the store clock and default TTL.
    pub fn new_entry(&self, key: CacheKey, kv: Arc<KvTensor>, position_base: usize) -> KvCacheEntry {
        KvCacheEntry::new(key, kv, position_base, self.now(), self.config.default_ttl)
    }

    /// Inserts or overwrites an entry on the Device tier.
    pub fn put(&self, entry: KvCacheEntry) -> Result<()> {
        if entry.kv.n_tokens() == 0 {
            return Err(Error::Validation("cannot store an empty cache".into()));
        }
        let mut inner = self.inner.lock();
        if let Some(old) = inner.slots.remove(&entry.key) {
            if old.persisted {
                self.remove_files(&entry.key);
            }
        }
        let touch = inner.touch();
        inner.slots.insert(
            entry.key.clone(),
            Slot {
                meta: Meta {
                    position_base: entry.position_base,
                    token_count: entry.kv.n_tokens(),
                    created_at: entry.created_at,
                    ttl: entry.ttl,
                    embedding: entry.embedding,
                },
                tier: Tier::Device,
                kv: Some(entry.kv),
                persisted: false,
                last_touch: touch,
            },
        );
        self.enforce_budgets(&mut inner)
    }

    /// Partitions `keys` into live hits and misses. Metadata only.
    pub fn lookup_many(&self, keys: &[CacheKey]) -> LookupReport {
        let now = self.now();
        let inner = self.inner.lock();
        let mut report = LookupReport::default();
        for key in keys {
            match inner.slots.get(key) {
                Some(slot) if !expired(slot.meta.created_at, slot.meta.ttl, now) => {
                    report.hits.push((key.clone(), slot.tier))
                }
                _ => report.misses.push(key.clone()),
            }
        }
        report
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.lookup_many(std::slice::from_ref(key)).misses.is_empty()
    }

    pub fn tier_of(&self, key: &CacheKey) -> Option<Tier> {
        self.inner.lock().slots.get(key).map(|s| s.tier)
    }

    /// Returns the entry and promotes it to the Device tier.
    ///
    /// Disk reads are checksum-verified; a corrupt file yields
    /// [`Error::Integrity`] and the entry is dropped.
    pub fn fetch(&self, key: &CacheKey) -> Result<KvCacheEntry> {
        let now = self.now();
        let (meta, resident) = {
            let mut inner = self.inner.lock();
            let Some(slot) = inner.slots.get(key) else {
                return Err(Error::NotFound(key.clone()));
            };
            if expired(slot.meta.created_at, slot.meta.ttl, now) {
                self.drop_slot(&mut inner, key);
                return Err(Error::NotFound(key.clone()));
            }
            if let Some(kv) = slot.kv.clone() {
                let meta = slot.meta.clone();
                let touch = inner.touch();
                let slot = inner.slots.get_mut(key).expect("present");
                slot.tier = Tier::Device;
                slot.last_touch = touch;
                self.enforce_budgets(&mut inner)?;
                return Ok(self.materialise(key, kv, meta));
            }
            (slot.meta.clone(), None::<Arc<KvTensor>>)
        };
        debug_assert!(resident.is_none());

        // Disk read happens without holding the lock.
        let path = self.entry_path(key).ok_or_else(|| Error::NotFound(key.clone()))?;
        let bytes = fs::read(&path)?;
        let decoded = match format::deserialize(&bytes) {
            Ok(d) => d,
            Err(source) => {
                let mut inner = self.inner.lock();
                self.drop_slot(&mut inner, key);
                return Err(Error::Integrity { path, source });
            }
        };
        decoded.verify_for(key)?;
        let kv = Arc::new(decoded.kv);

        let mut inner = self.inner.lock();
        let touch = inner.touch();
        match inner.slots.get_mut(key) {
            Some(slot) => {
                if slot.kv.is_none() {
                    slot.kv = Some(kv.clone());
                }
                slot.tier = Tier::Device;
                slot.last_touch = touch;
            }
            None => return Err(Error::NotFound(key.clone())),
        }
        self.enforce_budgets(&mut inner)?;
        Ok(self.materialise(key, kv, meta))
    }

    fn materialise(&self, key: &CacheKey, kv: Arc<KvTensor>, meta: Meta) -> KvCacheEntry {
        KvCacheEntry {
            key: key.clone(),
            kv,
            position_base: meta.position_base,
            created_at: meta.created_at,
            ttl: meta.ttl,
            tier: Tier::Device,
            embedding: meta.embedding,
        }
    }

    pub fn remove(&self, key: &CacheKey) -> bool {
        let mut inner = self.inner.lock();
        self.drop_slot(&mut inner, key)
    }

    /// Removes every entry expired at `now`, then re-applies tier budgets.
    pub fn evict_and_expire(&self, now: SystemTime) -> Result<usize> {
        let mut inner = self.inner.lock();
        let dead: Vec<CacheKey> = inner
            .slots
            .iter()
            .filter(|(_, s)| expired(s.meta.created_at, s.meta.ttl, now))
            .map(|(k, _)| k.clone())
            .collect();
        for key in &dead {
            self.drop_slot(&mut inner, key);
        }
        self.enforce_budgets(&mut inner)?;
        Ok(dead.len())
    }

    pub fn set_budgets(&self, device: usize, host: usize) {
        let mut inner = self.inner.lock();
        inner.device_budget = device;
        inner.host_budget = host;
    }

    /// Moves an entry to `tier` directly. Used for staging experiments and
    /// tests; normal placement follows the budgets.
    pub fn place(&self, key: &CacheKey, tier: Tier) -> Result<()> {
        let mut inner = self.inner.lock();
        let Some(slot) = inner.slots.get(key) else {
            return Err(Error::NotFound(key.clone()));
        };
        if tier == Tier::Disk {
            self.demote_to_disk(&mut inner, key)?;
        } else {
            if slot.kv.is_none() {
                drop(inner);
                self.fetch(key)?;
                inner = self.inner.lock();
            }
            if let Some(slot) = inner.slots.get_mut(key) {
                slot.tier = tier;
            }
        }
        Ok(())
    }

    /// Writes every resident, not yet persisted entry to disk. Tiers are
    /// unchanged; returns the number of files written.
    pub fn flush(&self) -> Result<usize> {
        if self.config.disk_dir.is_none() {
            return Ok(0);
        }
        let mut inner = self.inner.lock();
        let pending: Vec<CacheKey> = inner
            .slots
            .iter()
            .filter(|(_, s)| !s.persisted && s.kv.is_some())
            .map(|(k, _)| k.clone())
            .collect();
        for key in &pending {
            let slot = inner.slots.get_mut(key).expect("present");
            self.write_files(key, slot)?;
            slot.persisted = true;
        }
        Ok(pending.len())
    }

    pub fn list(&self, namespace: Option<&str>) -> Vec<EntryInfo> {
        let now = self.now();
        let inner = self.inner.lock();
        let mut rows: Vec<EntryInfo> = inner
            .slots
            .iter()
            .filter(|(k, s)| {
                namespace.map_or(true, |ns| k.namespace == ns)
                    && !expired(s.meta.created_at, s.meta.ttl, now)
            })
            .map(|(k, s)| {
                let deadline = s.meta.created_at.checked_add(s.meta.ttl);
                EntryInfo {
                    namespace: k.namespace.clone(),
                    cache_id: k.cache_id(),
                    tier: s.tier,
                    token_count: s.meta.token_count,
                    position_base: s.meta.position_base,
                    expires_in_secs: deadline
                        .and_then(|d| d.duration_since(now).ok())
                        .map_or(f64::INFINITY, |d| d.as_secs_f64()),
                }
            })
            .collect();
        rows.sort_by(|a, b| (&a.namespace, &a.cache_id).cmp(&(&b.namespace, &b.cache_id)));
        rows
    }

    /// Live entries of `namespace` that carry a retrieval embedding,
    /// ordered by key.
    pub fn embeddings(&self, namespace: &str) -> Vec<(CacheKey, Vec<f32>)> {
        let now = self.now();
        let inner = self.inner.lock();
        let mut out: Vec<(CacheKey, Vec<f32>)> = inner
            .slots
            .iter()
            .filter(|(k, s)| k.namespace == namespace && !expired(s.meta.created_at, s.meta.ttl, now))
            .filter_map(|(k, s)| s.meta.embedding.clone().map(|e| (k.clone(), e)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn len(&self) -> usize {
        self.inner.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Where the entry's file lives (or would live) on disk.
    pub fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.config.disk_dir.as_ref().map(|dir| {
            dir.join(format!("{:016x}", key.model_fingerprint))
                .join(format!("{:016x}", key.namespace_hash()))
                .join(format!("{}.mpic", key.cache_id()))
        })
    }

    fn enforce_budgets(&self, inner: &mut Inner) -> Result<()> {
        let device_budget = inner.device_budget;
        for key in over_budget(inner, Tier::Device, device_budget) {
            if let Some(slot) = inner.slots.get_mut(&key) {
                slot.tier = Tier::Host;
            }
        }
        let host_budget = inner.host_budget;
        for key in over_budget(inner, Tier::Host, host_budget) {
            if self.config.disk_dir.is_some() {
                self.demote_to_disk(inner, &key)?;
            } else {
                inner.slots.remove(&key);
            }
        }
        Ok(())
    }

    fn demote_to_disk(&self, inner: &mut Inner, key: &CacheKey) -> Result<()> {
        if self.config.disk_dir.is_none() {
            return Err(Error::Validation("store has no disk tier".into()));
        }
        let slot = inner
            .slots
            .get_mut(key)
            .ok_or_else(|| Error::NotFound(key.clone()))?;
        if !slot.persisted {
            self.write_files(key, slot)?;
            slot.persisted = true;
        }
        slot.kv = None;
        slot.tier = Tier::Disk;
        Ok(())
    }

    fn write_files(&self, key: &CacheKey, slot: &Slot) -> Result<()> {
        let path = self.entry_path(key).expect("disk tier configured");
        let kv = slot.kv.clone().expect("resident entry");
        let entry = KvCacheEntry {
            key: key.clone(),
            kv,
            position_base: slot.meta.position_base,
            created_at: slot.meta.created_at,
            ttl: slot.meta.ttl,
            tier: Tier::Disk,
            embedding: None,
        };
        let bytes = format::serialize(&entry)?;
        let sidecar = Sidecar {
            namespace: key.namespace.clone(),
            created_at_ms: millis_since_epoch(slot.meta.created_at),
            ttl_ms: slot.meta.ttl.as_millis().min(u64::MAX as u128) as u64,
            embedding: slot.meta.embedding.clone(),
        };
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir)?;
        write_atomic(&sidecar_path(&path), &serde_json::to_vec(&sidecar).map_err(io_err)?)?;
        write_atomic(&path, &bytes)?;
        Ok(())
    }

    fn drop_slot(&self, inner: &mut Inner, key: &CacheKey) -> bool {
        match inner.slots.remove(key) {
            Some(slot) => {
                if slot.persisted {
                    self.remove_files(key);
                }
                true
            }
            None => false,
        }
    }

    fn remove_files(&self, key: &CacheKey) {
        if let Some(path) = self.entry_path(key) {
            let _ = fs::remove_file(sidecar_path(&path));
            let _ = fs::remove_file(path);
        }
    }
}

/// Least-recently-touched keys on `tier` beyond `budget`.
fn over_budget(inner: &Inner, tier: Tier, budget: usize) -> Vec<CacheKey> {
    let mut on_tier: Vec<(u64, &CacheKey)> = inner
        .slots
        .iter()
        .filter(|(_, s)| s.tier == tier)
        .map(|(k, s)| (s.last_touch, k))
        .collect();
    if on_tier.len() <= budget {
        return Vec::new();
    }
    on_tier.sort();
    let excess = on_tier.len() - budget;
    on_tier[..excess].iter().map(|(_, k)| (*k).clone()).collect()
}

fn sidecar_path(entry_path: &Path) -> PathBuf {
    entry_path.with_extension("json")
}

fn millis_since_epoch(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(e: serde_json::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Registers every `<fingerprint>/<namespace>/<hash>.mpic` file with a
/// readable header and sidecar as a Disk-tier entry.
fn scan_disk(root: &Path, inner: &mut Inner) -> Result<()> {
    for fp_dir in read_dirs(root)? {
        for ns_dir in read_dirs(&fp_dir)? {
            for file in fs::read_dir(&ns_dir)? {
                let path = file?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("mpic") {
                    continue;
                }
                let Some((key, slot)) = load_disk_slot(&path) else {
                    continue;
                };
                let touch = inner.touch();
                inner.slots.insert(key, Slot { last_touch: touch, ..slot });
            }
        }
    }
    Ok(())
}

fn read_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn load_disk_slot(path: &Path) -> Option<(CacheKey, Slot)> {
    use std::io::Read;
    let mut head = vec![0u8; format::HEADER_LEN];
    fs::File::open(path).ok()?.read_exact(&mut head).ok()?;
    let header = format::read_header(&head).ok()?;
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path)).ok()?).ok()?;
    let key = CacheKey {
        content_hash: header.content_hash,
        model_fingerprint: header.model_fingerprint,
        namespace: sidecar.namespace,
    };
    if key.namespace_hash() != header.namespace_hash {
        return None;
    }
    let slot = Slot {
        meta: Meta {
            position_base: header.position_base as usize,
            token_count: header.n_tokens as usize,
            created_at: UNIX_EPOCH + Duration::from_millis(sidecar.created_at_ms),
            ttl: Duration::from_millis(sidecar.ttl_ms),
            embedding: sidecar.embedding,
        },
        tier: Tier::Disk,
        kv: None,
        persisted: true,
        last_touch: 0,
    };
    Some((key, slot))
}
