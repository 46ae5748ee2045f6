//! Request execution: resolve segments, prepare image caches, prefill in the
//! requested mode, then decode greedily. A sentinel token in the output
//! triggers retrieval from the dynamic library; hits are linked onto the end
//! of the running cache before decoding continues.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mpic_core::linker::{Linker, PrefillOutput, Segment, SegmentedPrompt, SelectionPolicy};
use mpic_core::model::{Logits, Model};
use mpic_core::retriever::{RetrievalQuery, Retriever, SentinelTrigger};
use mpic_core::store::{CacheKey, CacheStore, Clock, EntryInfo, KvCacheEntry, SystemClock, DYNAMIC_NAMESPACE};
use mpic_core::transfer::{self, FaultInjection, PrepareItem, PrepareRequest, TransferConfig};
use mpic_core::KvTensor;

use crate::config::ServeConfig;
use crate::error::{Error, Result};
use crate::library::{image_id, ImageLibrary};
use crate::request::{decode_inline, BenchRecord, Mode, PrepareSummary, Request, Response, SegmentSource};
use crate::tokenizer;

pub struct Engine {
    config: ServeConfig,
    model: Model,
    store: CacheStore,
    library: ImageLibrary,
    retriever: Retriever,
    transfer: TransferConfig,
    trigger: SentinelTrigger,
}

struct Resolved {
    prompt: SegmentedPrompt,
    items: Vec<PrepareItem>,
}

struct Prefilled {
    kv: KvTensor,
    logits: Logits,
    recomputed: usize,
    prepare: Option<PrepareSummary>,
}

fn prefix_namespace(user: &str) -> String {
    format!("{user}/prefix")
}

fn parse_id(id: &str) -> Result<[u8; 32]> {
    let bad = || Error::Request(format!("{id:?} is not a cache id"));
    if id.len() != 64 || !id.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&id[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Engine {
    pub fn new(config: ServeConfig) -> Result<Self> {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: ServeConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let model = Model::build(config.model.to_model_config())?;
        let store = CacheStore::with_clock(config.store_config(), clock)?;
        let retriever = Retriever::new(model.config().hidden_dim);
        for (key, embedding) in store.embeddings(DYNAMIC_NAMESPACE) {
            if key.model_fingerprint == model.fingerprint() {
                retriever.index(key, embedding)?;
            }
        }
        Ok(Self {
            library: ImageLibrary::new(config.image_dir()),
            transfer: config.transfer_config(),
            trigger: SentinelTrigger::new(config.sentinel()),
            config,
            model,
            store,
            retriever,
        })
    }

    /// Test hook: make cache loads fail.
    pub fn set_fault_injection(&mut self, fault: Option<FaultInjection>) {
        self.transfer.fault = fault;
    }

    pub fn config(&self) -> &ServeConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    pub fn library(&self) -> &ImageLibrary {
        &self.library
    }

    pub fn retriever(&self) -> &Retriever {
        &self.retriever
    }

    fn linker(&self) -> Linker<'_> {
        Linker::new(&self.model, self.config.linker_config())
    }

    fn compute_entry(&self, key: CacheKey, bytes: &[u8]) -> Result<KvCacheEntry> {
        let tokens = self.model.encode_image(bytes)?;
        let (kv, _) = self.model.prefill_at(&tokens, 0)?;
        Ok(self.store.new_entry(key, Arc::new(kv), 0))
    }

    /// Adds an image to `user`'s static library and precomputes its cache.
    pub fn put_image(&self, user: &str, bytes: Vec<u8>) -> Result<String> {
        let key = CacheKey::for_bytes(&bytes, self.model.fingerprint(), user);
        self.store.put(self.compute_entry(key, &bytes)?)?;
        let id = self.library.persist(user, bytes)?;
        self.store.flush()?;
        Ok(id)
    }

    /// Adds an image to the dynamic library and indexes it for retrieval.
    pub fn add_dynamic(&self, bytes: Vec<u8>) -> Result<String> {
        let key = CacheKey::for_bytes(&bytes, self.model.fingerprint(), DYNAMIC_NAMESPACE);
        let mut entry = self.compute_entry(key.clone(), &bytes)?;
        let embedding = self.model.embed_mean(&self.model.encode_image(&bytes)?)?;
        entry.embedding = Some(embedding.clone());
        self.store.put(entry)?;
        self.retriever.index(key, embedding)?;
        let id = self.library.persist(DYNAMIC_NAMESPACE, bytes)?;
        self.store.flush()?;
        Ok(id)
    }

    pub fn remove_image(&self, user: &str, id: &str) -> Result<bool> {
        let key = CacheKey {
            content_hash: parse_id(id)?,
            model_fingerprint: self.model.fingerprint(),
            namespace: user.to_string(),
        };
        self.retriever.remove(&key);
        let cached = self.store.remove(&key);
        let stored = self.library.remove(user, id);
        Ok(cached || stored)
    }

    pub fn list(&self, namespace: Option<&str>) -> Vec<EntryInfo> {
        self.store.list(namespace)
    }

    fn resolve(&self, req: &Request) -> Result<Resolved> {
        if req.user.is_empty() || req.user.contains('/') || req.user == DYNAMIC_NAMESPACE {
            return Err(Error::Request(format!("invalid user {:?}", req.user)));
        }
        if req.max_tokens == 0 {
            return Err(Error::Request("max_tokens must be at least 1".into()));
        }
        let mut segments = Vec::new();
        let mut items = Vec::new();
        for source in &req.segments {
            match source {
                SegmentSource::Text { text } => {
                    let ids = tokenizer::encode(text);
                    if !ids.is_empty() {
                        segments.push(Segment::Text(ids));
                    }
                }
                SegmentSource::Image { cache_id, data } => {
                    let bytes = match (data, cache_id) {
                        (Some(data), id) => {
                            let bytes = decode_inline(data)?;
                            if id.as_ref().is_some_and(|id| *id != image_id(&bytes)) {
                                return Err(Error::Request("inline image does not match its cache_id".into()));
                            }
                            self.library.insert(&req.user, bytes.clone());
                            Arc::new(bytes)
                        }
                        (None, Some(id)) => self.library.get(&req.user, id).ok_or_else(|| {
                            Error::Request(format!("cache_id {id} is not in {}'s library", req.user))
                        })?,
                        (None, None) => return Err(Error::Request("image segment needs cache_id or data".into())),
                    };
                    let tokens = self.model.encode_image(&bytes)?.into_inner();
                    let key = CacheKey::for_bytes(&bytes, self.model.fingerprint(), req.user.as_str());
                    items.push(PrepareItem {
                        key: key.clone(),
                        tokens: tokens.clone(),
                    });
                    segments.push(Segment::Image { key, tokens });
                }
            }
        }
        if segments.is_empty() {
            return Err(Error::Request("request has no content".into()));
        }
        Ok(Resolved {
            prompt: SegmentedPrompt::new(req.user.clone(), segments)?,
            items,
        })
    }

    /// Makes sure every image of `req` has a cache, without running it.
    pub fn warm(&self, req: &Request) -> Result<PrepareSummary> {
        let resolved = self.resolve(req)?;
        let report = transfer::prepare(
            &PrepareRequest {
                items: resolved.items,
                deadline: None,
            },
            &self.store,
            &self.model,
            &self.transfer,
        )?;
        Ok(PrepareSummary {
            loaded: report.loaded,
            computed: report.computed,
            fallbacks: report.fallbacks,
        })
    }

    /// The linked prompt `req` would be served with.
    pub fn prompt(&self, req: &Request) -> Result<SegmentedPrompt> {
        Ok(self.resolve(req)?.prompt)
    }

    /// The reused cache of `req` as linked from storage (text slots zeroed),
    /// next to the cache a full prefill computes for the same prompt.
    pub fn stored_and_recomputed(&self, req: &Request) -> Result<(SegmentedPrompt, KvTensor, KvTensor)> {
        let Resolved { prompt, items } = self.resolve(req)?;
        let report = transfer::prepare(
            &PrepareRequest { items, deadline: None },
            &self.store,
            &self.model,
            &self.transfer,
        )?;
        let fetched: Vec<KvCacheEntry> = report.entries.into_values().collect();
        let linked = self.linker().assemble_linked_cache(&prompt, &fetched)?;
        let (full, _) = self.model.full_prefill(&prompt.tokens())?;
        Ok((prompt, linked.kv, full))
    }

    pub fn handle(&self, req: &Request) -> Result<Response> {
        self.handle_at(req, Instant::now())
    }

    /// Serves `req` as if it arrived at `arrival`; the gap until now counts
    /// as queueing time.
    pub fn handle_at(&self, req: &Request, arrival: Instant) -> Result<Response> {
        let started = Instant::now();
        let Resolved { prompt, items } = self.resolve(req)?;
        let pre = self.prefill(req, &prompt, items)?;
        let first_token_at = Instant::now();

        let tokens = prompt.tokens();
        let text: Vec<u32> = prompt.text_indices().into_iter().map(|i| tokens[i]).collect();
        let mut kv = pre.kv;
        let mut logits = pre.logits.clone();
        let mut out = Vec::with_capacity(req.max_tokens);
        let mut retrieved = Vec::new();
        let mut linked = HashSet::new();
        loop {
            let t = logits.argmax();
            out.push(t);
            if out.len() >= req.max_tokens {
                break;
            }
            if self.trigger.fires(&out) {
                self.retrieve_into(&mut kv, &text, &mut linked, &mut retrieved)?;
            }
            let pos = kv.n_tokens();
            logits = self.model.decode_step(&mut kv, t, pos)?;
        }

        let completed_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        let record = BenchRecord {
            request_id: req.request_id.clone(),
            mode: req.mode.to_string(),
            images: prompt.image_count(),
            prompt_tokens: prompt.len(),
            ttft_s: first_token_at.saturating_duration_since(arrival).as_secs_f64(),
            queue_s: started.saturating_duration_since(arrival).as_secs_f64(),
            prefill_s: (first_token_at - started).as_secs_f64(),
            prefill_tokens_recomputed: pre.recomputed,
            output_tokens: out.len(),
            completed_at,
        };
        Ok(Response {
            request_id: req.request_id.clone(),
            text: tokenizer::decode(&out),
            output_ids: out,
            record,
            prepare: pre.prepare,
            retrieved,
            first_logits: pre.logits.0,
        })
    }

    fn prefill(&self, req: &Request, prompt: &SegmentedPrompt, items: Vec<PrepareItem>) -> Result<Prefilled> {
        let linker = self.linker();
        let from = |out: PrefillOutput, prepare| Prefilled {
            kv: out.kv,
            logits: out.logits,
            recomputed: out.stats.tokens_recomputed,
            prepare,
        };
        match req.mode {
            Mode::NoCache => {
                let (kv, logits) = self.model.full_prefill(&prompt.tokens())?;
                Ok(Prefilled {
                    kv,
                    logits,
                    recomputed: prompt.len(),
                    prepare: None,
                })
            }
            Mode::Prefix => Ok(from(self.prefix_prefill(&req.user, prompt)?, None)),
            mode => {
                let report = transfer::prepare(
                    &PrepareRequest { items, deadline: None },
                    &self.store,
                    &self.model,
                    &self.transfer,
                )?;
                let summary = Some(PrepareSummary {
                    loaded: report.loaded,
                    computed: report.computed,
                    fallbacks: report.fallbacks,
                });
                let fetched: Vec<KvCacheEntry> = report.entries.into_values().collect();
                let mask = match mode {
                    Mode::FullReuse => return Ok(from(linker.full_reuse_prefill(prompt, &fetched)?, summary)),
                    Mode::Mpic(k) => {
                        linker.select_tokens(prompt, SelectionPolicy::MpicK(k.unwrap_or(self.config.linker.k)))?
                    }
                    Mode::CacheBlend(r) => {
                        linker.cacheblend_select(prompt, &fetched, r.unwrap_or(self.config.linker.r))?
                    }
                    Mode::NoCache | Mode::Prefix => unreachable!("handled above"),
                };
                Ok(from(linker.link_and_prefill(prompt, &mask, &fetched)?, summary))
            }
        }
    }

    /// Reuses the longest cached prompt prefix ending at a segment boundary,
    /// then remembers this prompt up to its last segment.
    fn prefix_prefill(&self, user: &str, prompt: &SegmentedPrompt) -> Result<PrefillOutput> {
        let tokens = prompt.tokens();
        let fp = self.model.fingerprint();
        let ns = prefix_namespace(user);
        let mut bounds: Vec<usize> = prompt.starts()[1..].to_vec();
        bounds.push(tokens.len());
        let found = bounds
            .iter()
            .rev()
            .find_map(|&b| self.store.fetch(&CacheKey::for_tokens(&tokens[..b], fp, ns.as_str())).ok());
        let out = self.linker().prefix_prefill(&tokens, found.as_ref())?;

        let keep = *prompt.starts().last().expect("non-empty prompt");
        if keep > 0 {
            let key = CacheKey::for_tokens(&tokens[..keep], fp, ns);
            if found.as_ref().map_or(true, |e| e.key != key) && !self.store.contains(&key) {
                let entry = self.store.new_entry(key, Arc::new(out.kv.slice_tokens(0, keep)), 0);
                self.store.put(entry)?;
            }
        }
        Ok(out)
    }

    fn retrieve_into(
        &self,
        kv: &mut KvTensor,
        text: &[u32],
        linked: &mut HashSet<CacheKey>,
        retrieved: &mut Vec<String>,
    ) -> Result<()> {
        if self.retriever.is_empty() || text.is_empty() {
            return Ok(());
        }
        let query = RetrievalQuery {
            embedding: self.model.embed_mean(text)?,
            top_k: self.config.serving.retrieval_top_k,
        };
        for hit in self.retriever.retrieve(&query)? {
            if !linked.insert(hit.key.clone()) {
                continue;
            }
            let id = hit.key.cache_id();
            let entry = match self.store.fetch(&hit.key) {
                Ok(e) => e,
                Err(_) => {
                    let Some(bytes) = self.library.get(DYNAMIC_NAMESPACE, &id) else {
                        continue;
                    };
                    let entry = self.compute_entry(hit.key.clone(), &bytes)?;
                    self.store.put(entry.clone())?;
                    entry
                }
            };
            self.linker().append_entry(kv, &entry)?;
            retrieved.push(id);
        }
        Ok(())
    }
}
