//! Text-generation metrics and the report schema.
//!
//! All metrics tokenize with the canonical tokenizer and lie in `[0, 1]`.
//! `embed_f1` is a greedy-matching embedding F1 over provider token
//! vectors; it is structurally similar to BERTScore but uses static
//! embeddings, and reports always label it `embed_f1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, embed_tokens, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::tokens;
use crate::reward::{bleu_from_stats, bleu_stats, ngram_counts, BleuConfig, BleuStats};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: f64, cand_total: f64, ref_total: f64) -> Self {
        let precision = if cand_total > 0.0 { hits / cand_total } else { 0.0 };
        let recall = if ref_total > 0.0 { hits / ref_total } else { 0.0 };
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// ROUGE-N over clipped n-gram multiset overlap.
pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> Prf {
    rouge_n_tokens(&tokens(reference), &tokens(candidate), n)
}

pub fn rouge_n_tokens<S: AsRef<str>>(reference: &[S], candidate: &[S], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let hits: u64 = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(
        hits as f64,
        cand.values().sum::<u64>() as f64,
        refc.values().sum::<u64>() as f64,
    )
}

fn lcs_table<S: AsRef<str>>(a: &[S], b: &[S]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1].as_ref() == b[j - 1].as_ref() {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Positions in `a` of one longest common subsequence with `b`.
fn lcs_positions<S: AsRef<str>>(a: &[S], b: &[S]) -> Vec<usize> {
    let t = lcs_table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if a[i - 1].as_ref() == b[j - 1].as_ref() {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i][j - 1] > t[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

/// ROUGE-L over the token-level longest common subsequence.
pub fn rouge_l(reference: &str, candidate: &str) -> Prf {
    let (r, c) = (tokens(reference), tokens(candidate));
    Prf::from_counts(lcs_len(&r, &c) as f64, c.len() as f64, r.len() as f64)
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.peek().map_or(true, |&(_, n)| n.is_whitespace());
            if at_break {
                let end = i + c.len_utf8();
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out.retain(|s| !s.trim().is_empty());
    out
}

/// Summary-level ROUGE-L (LSum) F1.
///
/// For each reference sentence the union of its LCS positions against
/// every candidate sentence counts as hits, with each token credited at
/// most as many times as it occurs in both texts overall.
pub fn rouge_lsum(reference: &str, candidate: &str) -> f64 {
    let ref_sents: Vec<Vec<String>> = split_sentences(reference)
        .into_iter()
        .map(tokens)
        .filter(|s| !s.is_empty())
        .collect();
    let cand_sents: Vec<Vec<String>> = split_sentences(candidate)
        .into_iter()
        .map(tokens)
        .filter(|s| !s.is_empty())
        .collect();
    let ref_total: usize = ref_sents.iter().map(Vec::len).sum();
    let cand_total: usize = cand_sents.iter().map(Vec::len).sum();
    if ref_total == 0 || cand_total == 0 {
        return 0.0;
    }
    let mut ref_left: HashMap<&str, usize> = HashMap::new();
    for t in ref_sents.iter().flatten() {
        *ref_left.entry(t).or_default() += 1;
    }
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    for t in cand_sents.iter().flatten() {
        *cand_left.entry(t).or_default() += 1;
    }
    let mut hits = 0usize;
    for r in &ref_sents {
        let mut union: Vec<usize> = cand_sents.iter().flat_map(|c| lcs_positions(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for pos in union {
            let t = r[pos].as_str();
            let (Some(rl), Some(cl)) = (ref_left.get(t).copied(), cand_left.get(t).copied()) else {
                continue;
            };
            if rl > 0 && cl > 0 {
                hits += 1;
                ref_left.insert(t, rl - 1);
                cand_left.insert(t, cl - 1);
            }
        }
    }
    Prf::from_counts(hits as f64, cand_total as f64, ref_total as f64).f1
}

fn weighted_best_match(
    from: &[Vec<f64>],
    from_tokens: &[String],
    to: &[Vec<f64>],
    idf: Option<&HashMap<String, f64>>,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, t) in from.iter().zip(from_tokens) {
        let w = idf.and_then(|m| m.get(t).copied()).unwrap_or(1.0);
        let mut best = f64::NEG_INFINITY;
        for u in to {
            best = best.max(cosine(v, u)?);
        }
        num += w * best;
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { -1.0 })
}

/// Greedy-matching embedding F1. Precision is the mean best cosine of each
/// candidate token against the reference, recall the converse; both are
/// mapped from `[-1, 1]` to `[0, 1]` before taking the harmonic mean.
/// Optional idf weights apply per token (missing tokens weigh 1).
pub fn embed_f1(
    reference: &str,
    candidate: &str,
    provider: &dyn EmbeddingProvider,
    idf: Option<&HashMap<String, f64>>,
) -> Result<f64> {
    let (r, c) = (tokens(reference), tokens(candidate));
    if r.is_empty() || c.is_empty() {
        return Ok(0.0);
    }
    let mut cache = HashMap::new();
    let er = embed_tokens(&r, provider, &mut cache)?;
    let ec = embed_tokens(&c, provider, &mut cache)?;
    let p = (weighted_best_match(&ec, &c, &er, idf)? + 1.0) / 2.0;
    let rc = (weighted_best_match(&er, &r, &ec, idf)? + 1.0) / 2.0;
    Ok(f1(p, rc).clamp(0.0, 1.0))
}

/// Best `embed_f1` between the ground knowledge and any retrieved passage.
pub fn eval_retriever<S: AsRef<str>>(
    retrieved: &[S],
    ground_knowledge: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let mut best = 0.0f64;
    for p in retrieved {
        best = best.max(embed_f1(ground_knowledge, p.as_ref(), provider, None)?);
    }
    Ok(best)
}

/// Per-item metric values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: f64,
    pub embed_f1: f64,
}

/// Scores `candidate` against `reference` with every metric.
pub fn score_pair(
    reference: &str,
    candidate: &str,
    provider: &dyn EmbeddingProvider,
    bleu_cfg: &BleuConfig,
) -> Result<(MetricRow, BleuStats)> {
    let (r, c) = (tokens(reference), tokens(candidate));
    let stats = bleu_stats(&r, &c, bleu_cfg.max_n);
    let row = MetricRow {
        bleu: bleu_from_stats(&stats, bleu_cfg),
        rouge1: rouge_n_tokens(&r, &c, 1).f1,
        rouge2: rouge_n_tokens(&r, &c, 2).f1,
        rouge_l: Prf::from_counts(lcs_len(&r, &c) as f64, c.len() as f64, r.len() as f64).f1,
        rouge_lsum: rouge_lsum(reference, candidate),
        embed_f1: embed_f1(reference, candidate, provider, None)?,
    };
    Ok((row, stats))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportItem {
    pub id: String,
    pub metrics: Option<MetricRow>,
    pub bleu_stats: Option<BleuStats>,
    pub persona_agreement: Option<f64>,
    /// Reserved for metrics computed outside the engine.
    pub external_metric: Option<f64>,
    pub error: Option<String>,
}

impl ReportItem {
    pub fn scored(id: impl Into<String>, metrics: MetricRow, stats: BleuStats) -> Self {
        Self {
            id: id.into(),
            metrics: Some(metrics),
            bleu_stats: Some(stats),
            ..Self::default()
        }
    }

    pub fn failed(id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            error: Some(error.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scored: usize,
    pub failed: usize,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: f64,
    pub embed_f1: f64,
    pub corpus_bleu: f64,
    pub persona_agreement: Option<f64>,
    pub external_metric: Option<f64>,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in it {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl Aggregates {
    /// Means over scored items in order, and corpus BLEU from pooled counts.
    pub fn compute(items: &[ReportItem], bleu_cfg: &BleuConfig) -> Self {
        let rows: Vec<&MetricRow> = items.iter().filter_map(|i| i.metrics.as_ref()).collect();
        let mean = |f: fn(&MetricRow) -> f64| mean_of(rows.iter().map(|r| f(r))).unwrap_or(0.0);
        let mut pooled = BleuStats::zero(bleu_cfg.max_n);
        for s in items.iter().filter_map(|i| i.bleu_stats.as_ref()) {
            pooled.add(s);
        }
        Self {
            scored: rows.len(),
            failed: items.iter().filter(|i| i.error.is_some()).count(),
            bleu: mean(|r| r.bleu),
            rouge1: mean(|r| r.rouge1),
            rouge2: mean(|r| r.rouge2),
            rouge_l: mean(|r| r.rouge_l),
            rouge_lsum: mean(|r| r.rouge_lsum),
            embed_f1: mean(|r| r.embed_f1),
            corpus_bleu: bleu_from_stats(&pooled, bleu_cfg),
            persona_agreement: mean_of(items.iter().filter_map(|i| i.persona_agreement)),
            external_metric: mean_of(items.iter().filter_map(|i| i.external_metric)),
        }
    }
}

/// Per-item rows plus aggregates, serialized with a fixed key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub label: String,
    pub config: Option<serde_json::Value>,
    pub items: Vec<ReportItem>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, items: Vec<ReportItem>, bleu_cfg: &BleuConfig) -> Self {
        let aggregates = Aggregates::compute(&items, bleu_cfg);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            config: None,
            items,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
