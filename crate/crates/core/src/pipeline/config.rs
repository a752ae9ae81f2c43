//! Pipeline configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embeddings::{load_store, CachingEmbedder, EmbeddingProvider, HashEmbedder, OovPolicy, StoreEmbedder};
use crate::error::{Error, Result};
use crate::generation::{ChatClientConfig, DEFAULT_CANDIDATES};
use crate::model::{RewardWeights, WeightMode};
use crate::persona_select::SelectorConfig;
use crate::retrieval::{Bm25Params, QueryMode, RetrieveRankConfig, Stage1Method};
use crate::reward::BleuConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub stage1: Stage1Method,
    pub pool: usize,
    pub k: usize,
    pub query_mode: QueryMode,
    /// Stage-2 scorer: `identity` or `embedding`.
    pub rerank: String,
    /// Query rewriter: `identity` or `topic`.
    pub rewriter: String,
    pub lsh_tables: usize,
    pub lsh_bits: usize,
    pub bm25: Bm25Params,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let rr = RetrieveRankConfig::default();
        Self {
            stage1: rr.stage1,
            pool: rr.pool,
            k: rr.k,
            query_mode: rr.query_mode,
            rerank: "embedding".into(),
            rewriter: "identity".into(),
            lsh_tables: 16,
            lsh_bits: 12,
            bm25: rr.bm25,
        }
    }
}

impl RetrievalSection {
    pub fn retrieve_rank(&self) -> RetrieveRankConfig {
        RetrieveRankConfig {
            stage1: self.stage1,
            pool: self.pool,
            k: self.k,
            query_mode: self.query_mode,
            bm25: self.bm25,
        }
    }
}

/// Which text rewards are computed against at inference time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceReference {
    /// Top passage body followed by the selected persona texts.
    #[default]
    KnowledgePersona,
    /// Top passage body only.
    Knowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub bleu: BleuConfig,
    pub inference_reference: InferenceReference,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            bleu: BleuConfig::default(),
            inference_reference: InferenceReference::default(),
        }
    }
}

impl RewardSection {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights::new(self.alpha, self.beta, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: String,
    pub candidates: usize,
    pub top_passages: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: "template".into(),
            candidates: DEFAULT_CANDIDATES,
            top_passages: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Store,
}

/// Distinct tokens memoized per hash embedder.
const TOKEN_CACHE_CAPACITY: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
    /// For stores: embed unknown tokens with the hash embedder instead of
    /// failing.
    pub oov_hash_fallback: bool,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dim: 128,
            seed: 0x6b70_6572_6d00_0001,
            path: None,
            oov_hash_fallback: true,
        }
    }
}

impl EmbedderSection {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self.kind {
            EmbedderKind::Hash => Arc::new(CachingEmbedder::new(
                HashEmbedder::new(self.dim, self.seed)?,
                TOKEN_CACHE_CAPACITY,
            )),
            EmbedderKind::Store => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("store embedder needs a path".into()))?;
                let policy = if self.oov_hash_fallback {
                    OovPolicy::HashFallback { seed: self.seed }
                } else {
                    OovPolicy::Error
                };
                Arc::new(StoreEmbedder::new(load_store(path)?, policy)?)
            }
        })
    }
}

/// `hash`, `hash:<dim>`, `hash:<dim>:<seed>` or `store:<path>`.
impl FromStr for EmbedderSection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let base = EmbedderSection::default();
        if let Some(path) = s.strip_prefix("store:") {
            if path.is_empty() {
                return Err(Error::Config("store embedder needs a path".into()));
            }
            return Ok(Self {
                kind: EmbedderKind::Store,
                path: Some(PathBuf::from(path)),
                ..base
            });
        }
        let mut parts = s.split(':');
        if parts.next() != Some("hash") {
            return Err(Error::Config(format!("unknown embedder `{s}`")));
        }
        let num = |p: Option<&str>, what: &str| -> Result<Option<u64>> {
            p.map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("embedder {what} `{v}` is not a number")))
            })
            .transpose()
        };
        let dim = num(parts.next(), "dim")?;
        let seed = num(parts.next(), "seed")?;
        if parts.next().is_some() {
            return Err(Error::Config(format!("unknown embedder `{s}`")));
        }
        Ok(Self {
            dim: dim.map_or(base.dim, |d| d as usize),
            seed: seed.unwrap_or(base.seed),
            ..base
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    /// Worker threads for per-turn evaluation; 0 uses all cores.
    pub workers: usize,
    /// Largest tolerated fraction of failed chat requests in `augment`.
    pub client_failure_threshold: f64,
    pub split: Option<String>,
    pub max_turns: Option<usize>,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            workers: 0,
            client_failure_threshold: 0.1,
            split: None,
            max_turns: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub retrieval: RetrievalSection,
    pub selector: SelectorConfig,
    pub reward: RewardSection,
    pub generator: GeneratorSection,
    pub embedder: EmbedderSection,
    pub client: ChatClientConfig,
    pub harness: HarnessSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            retrieval: RetrievalSection::default(),
            selector: SelectorConfig::default(),
            reward: RewardSection::default(),
            generator: GeneratorSection::default(),
            embedder: EmbedderSection::default(),
            client: ChatClientConfig::default(),
            harness: HarnessSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are read as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts
                .pop()
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Config(format!("empty key in `{o}`")))?;
            let mut cur = &mut table;
            for p in parts {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
            }
            cur.insert(leaf.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.retrieve_rank().validate()?;
        match self.retrieval.rerank.as_str() {
            "identity" | "embedding" => {}
            other => return Err(Error::Config(format!("unknown rerank scorer `{other}`"))),
        }
        match self.retrieval.rewriter.as_str() {
            "identity" | "topic" => {}
            other => return Err(Error::Config(format!("unknown query rewriter `{other}`"))),
        }
        if self.retrieval.lsh_tables == 0 || !(1..=64).contains(&self.retrieval.lsh_bits) {
            return Err(Error::Config("lsh needs at least one table and 1 to 64 bits".into()));
        }
        let s = &self.selector;
        if s.max_selected > 2 {
            return Err(Error::Config(format!(
                "selector max_selected {} exceeds 2",
                s.max_selected
            )));
        }
        if !s.threshold.is_finite() || !s.no_persona_baseline.is_finite() {
            return Err(Error::Config("selector threshold and baseline must be finite".into()));
        }
        if s.scorer != "embedding" {
            return Err(Error::Config(format!("unknown persona scorer `{}`", s.scorer)));
        }
        self.reward.weights().validate(WeightMode::ThreeTerm)?;
        self.reward.bleu.validate()?;
        if self.generator.kind != "template" {
            return Err(Error::Config(format!("unknown generator `{}`", self.generator.kind)));
        }
        if self.generator.candidates == 0 || self.generator.top_passages == 0 {
            return Err(Error::Config(
                "generator candidates and top_passages must be at least 1".into(),
            ));
        }
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedder dim must be at least 1".into()));
        }
        if self.embedder.kind == EmbedderKind::Store && self.embedder.path.is_none() {
            return Err(Error::Config("store embedder needs a path".into()));
        }
        if !(0.0..=1.0).contains(&self.harness.client_failure_threshold) {
            return Err(Error::Config("client_failure_threshold must be in [0, 1]".into()));
        }
        self.client.validate()
    }
}
