//! TOML configuration for the engine and CLI.
//!
//! ```toml
//! [model]
//! n_layers = 2
//! n_heads = 4
//! head_dim = 32
//! vocab_size = 512
//! image_token_count = 128
//! seed = 0
//!
//! [cache]
//! device_budget = 64
//! host_budget = 256
//! disk_dir = "mpic-data"
//! ttl_seconds = 86400
//!
//! [linker]
//! k = 32
//! r = 15.0
//! reposition = "as-stored"   # or "rerotate"
//! k_scope = "per-image"      # or "global"
//!
//! [serving]
//! parallelism = 1
//! load_lanes = 1
//! compute_lanes = 1
//! retrieval_top_k = 1
//! # sentinel = 511           # defaults to vocab_size - 1
//! ```
//!
//! Every key is optional.

use std::path::{Path, PathBuf};
use std::time::Duration;

use mpic_core::linker::{KScope, LinkerConfig, Reposition};
use mpic_core::model::ModelConfig;
use mpic_core::store::StoreConfig;
use mpic_core::transfer::TransferConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::BYTE_VOCAB;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub image_token_count: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            head_dim: 32,
            vocab_size: 512,
            image_token_count: 128,
            seed: 0,
            rope_base: 10_000.0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.image_token_count,
            self.seed,
        );
        c.rope_base = self.rope_base;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub device_budget: usize,
    pub host_budget: usize,
    /// Persists caches and uploaded images when set.
    pub disk_dir: Option<PathBuf>,
    pub ttl_seconds: u64,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            device_budget: 64,
            host_budget: 256,
            disk_dir: None,
            ttl_seconds: 24 * 3600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkerSection {
    /// Default `k` for `mpic` without a value.
    pub k: usize,
    /// Default recompute percentage for `cacheblend` without a value.
    pub r: f64,
    pub reposition: Reposition,
    pub k_scope: KScope,
}

impl Default for LinkerSection {
    fn default() -> Self {
        Self {
            k: 32,
            r: 15.0,
            reposition: Reposition::AsStored,
            k_scope: KScope::PerImage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingSection {
    /// Requests handled at once; the rest wait in FIFO order.
    pub parallelism: usize,
    pub load_lanes: usize,
    pub compute_lanes: usize,
    pub retrieval_top_k: usize,
    pub sentinel: Option<u32>,
}

impl Default for ServingSection {
    fn default() -> Self {
        Self {
            parallelism: 1,
            load_lanes: 1,
            compute_lanes: 1,
            retrieval_top_k: 1,
            sentinel: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub model: ModelSection,
    pub cache: CacheSection,
    pub linker: LinkerSection,
    pub serving: ServingSection,
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config = Self::from_toml(&text)?;
        Ok(config.resolve_paths(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Relative `disk_dir` values are taken relative to the config file.
    fn resolve_paths(mut self, base: &Path) -> Self {
        if let Some(dir) = &self.cache.disk_dir {
            if dir.is_relative() {
                self.cache.disk_dir = Some(base.join(dir));
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_model_config().validate()?;
        if self.model.vocab_size <= BYTE_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must exceed {BYTE_VOCAB} so text bytes and the sentinel fit"
            )));
        }
        if self.sentinel() as usize >= self.model.vocab_size {
            return Err(Error::Config("sentinel outside the vocabulary".into()));
        }
        if !(0.0..=100.0).contains(&self.linker.r) {
            return Err(Error::Config(format!("r = {} outside [0, 100]", self.linker.r)));
        }
        let s = &self.serving;
        if s.parallelism == 0 || s.load_lanes == 0 || s.compute_lanes == 0 || s.retrieval_top_k == 0 {
            return Err(Error::Config("parallelism, lanes and retrieval_top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sentinel(&self) -> u32 {
        self.serving
            .sentinel
            .unwrap_or(self.model.vocab_size.saturating_sub(1) as u32)
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            device_budget: self.cache.device_budget,
            host_budget: self.cache.host_budget,
            disk_dir: self.cache.disk_dir.as_ref().map(|d| d.join("kv")),
            default_ttl: Duration::from_secs(self.cache.ttl_seconds),
        }
    }

    pub fn image_dir(&self) -> Option<PathBuf> {
        self.cache.disk_dir.as_ref().map(|d| d.join("images"))
    }

    pub fn linker_config(&self) -> LinkerConfig {
        LinkerConfig {
            k_scope: self.linker.k_scope,
            reposition: self.linker.reposition,
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            load_lanes: self.serving.load_lanes,
            compute_lanes: self.serving.compute_lanes,
            fault: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ServeConfig::from_toml("").unwrap(), ServeConfig::default());
        assert_eq!(ServeConfig::default().sentinel(), 511);
    }

    #[test]
    fn sections_parse() {
        let c = ServeConfig::from_toml(
            "[model]\nn_layers = 3\n[linker]\nreposition = \"rerotate\"\nk_scope = \"global\"\n[serving]\nparallelism = 4\n",
        )
        .unwrap();
        assert_eq!(c.model.n_layers, 3);
        assert_eq!(c.linker.reposition, Reposition::Rerotate);
        assert_eq!(c.linker.k_scope, KScope::Global);
        assert_eq!(c.serving.parallelism, 4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ServeConfig::from_toml("[model]\nvocab_size = 100\n").is_err());
        assert!(ServeConfig::from_toml("[model]\nhead_dim = 3\n").is_err());
        assert!(ServeConfig::from_toml("[linker]\nr = 150.0\n").is_err());
        assert!(ServeConfig::from_toml("[serving]\nparallelism = 0\n").is_err());
        assert!(ServeConfig::from_toml("[serving]\nbogus = 1\n").is_err());
    }
}
