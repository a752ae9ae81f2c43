//! Knowledge retrieval: lexical and dense candidate generation followed by
//! pluggable rescoring of the candidate pool.

mod dense;
mod lexical;
mod lsh;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dense::{mips_exact, DenseIndex, DENSE_MAGIC, DENSE_VERSION};
pub(crate) use dense::{put_str, ByteReader};
pub use lexical::{bm25_idf, bm25_retrieve, build_corpus, tfidf_retrieve, Bm25Params, Corpus};
pub use lsh::{lsh_query, LshIndex, LshResult};

use crate::embeddings::{cosine, embed_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{DialogHistory, Passage, RetrievedKnowledge, ScoredPassage};

/// Candidate generator for the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Method {
    Tfidf,
    Bm25,
    DenseExact,
    DenseLsh,
}

impl Stage1Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage1Method::Tfidf => "tfidf",
            Stage1Method::Bm25 => "bm25",
            Stage1Method::DenseExact => "dense_exact",
            Stage1Method::DenseLsh => "dense_lsh",
        }
    }
}

impl fmt::Display for Stage1Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage1Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(Self::Tfidf),
            "bm25" => Ok(Self::Bm25),
            "dense" | "dense_exact" => Ok(Self::DenseExact),
            "lsh" | "dense_lsh" => Ok(Self::DenseLsh),
            other => Err(Error::Config(format!("unknown retrieval method `{other}`"))),
        }
    }
}

/// How the retrieval query is built from the dialog history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// The last question only.
    #[default]
    Last,
    /// The previous question followed by the last one.
    WithPrevious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRankConfig {
    pub stage1: Stage1Method,
    /// Stage-1 pool size.
    pub pool: usize,
    pub k: usize,
    pub query_mode: QueryMode,
    pub bm25: Bm25Params,
}

impl Default for RetrieveRankConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Method::DenseExact,
            pool: 100,
            k: 10,
            query_mode: QueryMode::Last,
            bm25: Bm25Params::default(),
        }
    }
}

impl RetrieveRankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.pool {
            return Err(Error::Config(format!(
                "retrieval requires 1 <= k <= pool (k = {}, pool = {})",
                self.k, self.pool
            )));
        }
        Ok(())
    }
}

/// Stage-2 rescoring of a stage-1 candidate.
pub trait PassageScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, query: &str, passage: &Passage, stage1_score: f64) -> Result<f64>;
}

/// Keeps the stage-1 score.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stage1Scorer;

impl PassageScorer for Stage1Scorer {
    fn name(&self) -> &str {
        "identity"
    }
    fn score(&self, _: &str, _: &Passage, stage1_score: f64) -> Result<f64> {
        Ok(stage1_score)
    }
}

/// Scores every passage the same.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantScorer(pub f64);

impl PassageScorer for ConstantScorer {
    fn name(&self) -> &str {
        "constant"
    }
    fn score(&self, _: &str, _: &Passage, _: f64) -> Result<f64> {
        Ok(self.0)
    }
}

/// Bi-encoder surrogate: cosine between pooled query and passage embeddings.
pub struct EmbeddingScorer<P> {
    provider: P,
}

impl<P: EmbeddingProvider> EmbeddingScorer<P> {
    pub fn new(provider: P) -> Self {
        Self { provider }
    }
}

impl<P: EmbeddingProvider> PassageScorer for EmbeddingScorer<P> {
    fn name(&self) -> &str {
        "embedding"
    }
    fn score(&self, query: &str, passage: &Passage, _: f64) -> Result<f64> {
        let q = embed_text(query, &self.provider)?;
        let p = embed_text(&passage.body, &self.provider)?;
        cosine(&q.vector, &p.vector)
    }
}

/// Read-only view over the indexes a query may use.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub corpus: &'a Corpus,
    pub dense: Option<&'a DenseIndex>,
    pub lsh: Option<&'a LshIndex>,
    pub provider: &'a dyn EmbeddingProvider,
    pub bm25: Bm25Params,
}

impl<'a> Retriever<'a> {
    pub fn new(corpus: &'a Corpus, provider: &'a dyn EmbeddingProvider) -> Self {
        Self {
            corpus,
            dense: None,
            lsh: None,
            provider,
            bm25: Bm25Params::default(),
        }
    }

    pub fn with_dense(mut self, dense: &'a DenseIndex) -> Self {
        self.dense = Some(dense);
        self
    }

    pub fn with_lsh(mut self, lsh: &'a LshIndex) -> Self {
        self.lsh = Some(lsh);
        self
    }

    /// Runs a single retriever over the whole corpus.
    pub fn retrieve(&self, method: Stage1Method, query: &str, k: usize) -> Result<RetrievedKnowledge> {
        match method {
            Stage1Method::Tfidf => tfidf_retrieve(self.corpus, query, k),
            Stage1Method::Bm25 => bm25_retrieve(self.corpus, query, k, self.bm25),
            Stage1Method::DenseExact | Stage1Method::DenseLsh => {
                let dense = self
                    .dense
                    .ok_or_else(|| Error::Config("dense retrieval needs a dense index".into()))?;
                let q = embed_text(query, self.provider)?;
                if q.empty {
                    return Ok(RetrievedKnowledge::empty(k));
                }
                if method == Stage1Method::DenseExact {
                    mips_exact(dense, &q.vector, k)
                } else {
                    let lsh = self
                        .lsh
                        .ok_or_else(|| Error::Config("lsh retrieval needs an lsh index".into()))?;
                    Ok(lsh_query(lsh, dense, &q.vector, k)?.knowledge)
                }
            }
        }
    }
}

/// Retrieval query text for `history` under `mode`.
pub fn history_query(history: &DialogHistory, mode: QueryMode) -> Result<String> {
    let last = history.last_question()?;
    Ok(match (mode, history.previous_question()) {
        (QueryMode::WithPrevious, Some(prev)) => format!("{prev} {last}"),
        _ => last.to_string(),
    })
}

/// Two-stage retrieval: a pool of `cfg.pool` candidates from the stage-1
/// retriever, rescored by `scorer`, top `cfg.k` kept.
///
/// The rescoring sort is stable, so candidates with equal stage-2 scores
/// keep their stage-1 order.
pub fn retrieve_rank(
    retriever: &Retriever<'_>,
    query: &str,
    cfg: &RetrieveRankConfig,
    scorer: &dyn PassageScorer,
) -> Result<RetrievedKnowledge> {
    cfg.validate()?;
    let pool = retriever.retrieve(cfg.stage1, query, cfg.pool)?;
    let mut rescored = Vec::with_capacity(pool.len());
    for entry in &pool.entries {
        let passage = retriever
            .corpus
            .get(&entry.id)
            .ok_or_else(|| Error::Invalid(format!("retrieved id `{}` not in corpus", entry.id)))?;
        let score = scorer.score(query, passage, entry.score)?;
        rescored.push(ScoredPassage {
            id: entry.id.clone(),
            score,
        });
    }
    rescored.sort_by(|a, b| b.score.total_cmp(&a.score));
    rescored.truncate(cfg.k);
    RetrievedKnowledge::from_ranked(rescored, cfg.k)
}

/// [`retrieve_rank`] with the query taken from the dialog history.
pub fn retrieve_rank_history(
    retriever: &Retriever<'_>,
    history: &DialogHistory,
    cfg: &RetrieveRankConfig,
    scorer: &dyn PassageScorer,
) -> Result<RetrievedKnowledge> {
    let query = history_query(history, cfg.query_mode)?;
    retrieve_rank(retriever, &query, cfg, scorer)
}

/// Rewrites a query before retrieval. Failures are reported as text and
/// turned into an identity fallback by [`rewrite_query`].
pub trait QueryRewriter: Send + Sync {
    fn name(&self) -> &str;
    fn rewrite(&self, query: &str, topic: &str) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRewriter;

impl QueryRewriter for IdentityRewriter {
    fn name(&self) -> &str {
        "identity"
    }
    fn rewrite(&self, query: &str, _: &str) -> std::result::Result<String, String> {
        Ok(query.to_string())
    }
}

/// Appends the dialog topic to the query.
#[derive(Debug, Clone, Copy, Default)]
pub struct TopicAppendRewriter;

impl QueryRewriter for TopicAppendRewriter {
    fn name(&self) -> &str {
        "topic"
    }
    fn rewrite(&self, query: &str, topic: &str) -> std::result::Result<String, String> {
        let topic = topic.trim();
        Ok(if topic.is_empty() {
            query.to_string()
        } else {
            format!("{query} {topic}")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuery {
    pub text: String,
    /// Set when the rewriter failed and the original query was kept.
    pub warning: Option<String>,
}

pub fn rewrite_query(query: &str, topic: &str, rewriter: &dyn QueryRewriter) -> RewrittenQuery {
    match rewriter.rewrite(query, topic) {
        Ok(text) => RewrittenQuery { text, warning: None },
        Err(e) => {
            log::warn!("query rewriter `{}` failed: {e}", rewriter.name());
            RewrittenQuery {
                text: query.to_string(),
                warning: Some(format!("{}: {e}", rewriter.name())),
            }
        }
    }
}

#[derive(Deserialize)]
struct PassageLine {
    id: String,
    topic: String,
    body: String,
}

/// Parses a corpus in JSON Lines form (`{"id", "topic", "body"}` per line).
/// Blank lines are skipped.
pub fn parse_corpus_jsonl(text: &str, source_name: &str) -> Result<Vec<Passage>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PassageLine = serde_json::from_str(line).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        out.push(Passage::new(p.id, p.topic, p.body).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Serializes passages as JSON Lines.
pub fn corpus_to_jsonl(passages: &[Passage]) -> String {
    let mut out = String::new();
    for p in passages {
        out.push_str(&serde_json::to_string(p).expect("passage serializes"));
        out.push('\n');
    }
    out
}
