//! Corpus statistics and the lexical retrievers.
//!
//! TF-IDF uses `tf = 1 + ln(count)`, `idf = ln(N / df)` and cosine
//! normalization of both query and document vectors. BM25 is Okapi with
//! the `+0.5` smoothed idf `ln(1 + (N - df + 0.5) / (df + 0.5))`, summed
//! over distinct query terms.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tokens, Passage, RetrievedKnowledge, ScoredPassage};

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: usize,
    count: u32,
}

/// Passages plus the term statistics the lexical retrievers need.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    postings: HashMap<String, Vec<Posting>>,
    lengths: Vec<usize>,
    avg_len: f64,
    tfidf_norms: Vec<f64>,
}

/// Indexes `passages` with the canonical tokenizer. Ids must be unique.
pub fn build_corpus(passages: Vec<Passage>) -> Result<Corpus> {
    let mut by_id = HashMap::with_capacity(passages.len());
    for (i, p) in passages.iter().enumerate() {
        if by_id.insert(p.id.clone(), i).is_some() {
            return Err(Error::DuplicateId(p.id.clone()));
        }
    }
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut lengths = Vec::with_capacity(passages.len());
    let mut doc_terms: Vec<Vec<(String, u32)>> = Vec::with_capacity(passages.len());
    for (doc, p) in passages.iter().enumerate() {
        let toks = tokens(&p.body);
        lengths.push(toks.len());
        let mut counts: HashMap<String, u32> = HashMap::new();
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
        let mut terms: Vec<(String, u32)> = counts.into_iter().collect();
        terms.sort();
        for (t, c) in &terms {
            postings.entry(t.clone()).or_default().push(Posting { doc, count: *c });
        }
        doc_terms.push(terms);
    }
    let n = passages.len();
    let avg_len = if n == 0 {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / n as f64
    };
    let tfidf_norms = doc_terms
        .iter()
        .map(|terms| {
            terms
                .iter()
                .map(|(t, c)| {
                    let w = tf_weight(*c) * tfidf_idf(n, postings[t].len());
                    w * w
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(Corpus {
        passages,
        by_id,
        postings,
        lengths,
        avg_len,
        tfidf_norms,
    })
}

fn tf_weight(count: u32) -> f64 {
    1.0 + f64::from(count).ln()
}

fn tfidf_idf(n: usize, df: usize) -> f64 {
    (n as f64 / df as f64).ln()
}

/// Okapi idf with `+0.5` smoothing.
pub fn bm25_idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.lengths[doc]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Resolves retrieved ids to passages, skipping unknown ids.
    pub fn resolve<'a>(&'a self, knowledge: &'a RetrievedKnowledge) -> impl Iterator<Item = &'a Passage> + 'a {
        knowledge.ids().filter_map(move |id| self.get(id))
    }

    pub(crate) fn rank(&self, scores: HashMap<usize, f64>, k: usize) -> RetrievedKnowledge {
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.passages[a.0].id.cmp(&self.passages[b.0].id))
        });
        ranked.truncate(k);
        RetrievedKnowledge {
            entries: ranked
                .into_iter()
                .map(|(doc, score)| ScoredPassage {
                    id: self.passages[doc].id.clone(),
                    score,
                })
                .collect(),
            k,
        }
    }
}

/// Cosine over log-tf·idf vectors. Every passage sharing at least one query
/// term is a match; ties go to the smaller id.
pub fn tfidf_retrieve(corpus: &Corpus, query: &str, k: usize) -> Result<RetrievedKnowledge> {
    check_k(k)?;
    let n = corpus.len();
    let mut counts: HashMap<String, u32> = HashMap::new();
    for t in tokens(query) {
        if corpus.postings.contains_key(&t) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut q_norm = 0.0;
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for (term, c) in &counts {
        let postings = &corpus.postings[term];
        let idf = tfidf_idf(n, postings.len());
        let qw = tf_weight(*c) * idf;
        q_norm += qw * qw;
        for p in postings {
            *scores.entry(p.doc).or_default() += qw * tf_weight(p.count) * idf;
        }
    }
    let q_norm = q_norm.sqrt();
    for (doc, s) in scores.iter_mut() {
        let d_norm = corpus.tfidf_norms[*doc];
        *s = if q_norm > 0.0 && d_norm > 0.0 {
            *s / (q_norm * d_norm)
        } else {
            0.0
        };
    }
    Ok(corpus.rank(scores, k))
}

/// BM25 free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Okapi BM25 over distinct query terms.
pub fn bm25_retrieve(corpus: &Corpus, query: &str, k: usize, params: Bm25Params) -> Result<RetrievedKnowledge> {
    check_k(k)?;
    let n = corpus.len();
    let terms: HashSet<String> = tokens(query).into_iter().collect();
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for term in &terms {
        let Some(postings) = corpus.postings.get(term) else {
            continue;
        };
        let idf = bm25_idf(n, postings.len());
        for p in postings {
            let tf = f64::from(p.count);
            let rel_len = if corpus.avg_len > 0.0 {
                corpus.lengths[p.doc] as f64 / corpus.avg_len
            } else {
                0.0
            };
            let norm = params.k1 * (1.0 - params.b + params.b * rel_len);
            *scores.entry(p.doc).or_default() += idf * tf * (params.k1 + 1.0) / (tf + norm);
        }
    }
    Ok(corpus.rank(scores, k))
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::range("k", "must be at least 1"));
    }
    Ok(())
}
