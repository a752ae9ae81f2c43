//! Reward modulation for candidate responses.
//!
//! A candidate is scored against a reference response with three terms:
//!
//! * fidelity: sentence BLEU,
//! * semantic closeness: the relaxed word-mover similarity
//!   `(1/m) Σ_j max_i cos(e(t_i), e(t_j))` over the `m` candidate tokens,
//!   rescaled from `[-1, 1]` to `[0, 1]`,
//! * persona agreement: `1 - persona_loss(selected, ground_truth)`.
//!
//! The two-term blend is `α·bleu + (1-α)·mover`; the three-term blend is
//! `α·bleu + β·mover + γ·agreement` with `α + β + γ = 1`. All terms lie in
//! `[0, 1]`, and so does every total.
//!
//! The exact Word Mover's Distance and its relaxed lower bound are provided
//! alongside for analysis and cross-checks.

mod bleu;
mod transport;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub(crate) use bleu::ngram_counts;
pub use bleu::{bleu, bleu_from_stats, bleu_stats, BleuConfig, BleuStats, Smoothing};
pub use transport::{solve_transport, TransportPlan};

use crate::embeddings::{cosine, embed_tokens, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{tokenize, validate_weights, RewardBreakdown, RewardWeights, TokenizedDoc, WeightMode};
use crate::persona_select::persona_loss;

/// Ground distance between two token vectors: `1 - cos`, clipped to `[0, 2]`.
pub fn ground_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok((1.0 - cosine(u, v)?).clamp(0.0, 2.0))
}

fn type_cost_matrix(a: &TokenizedDoc, b: &TokenizedDoc, provider: &dyn EmbeddingProvider) -> Result<Vec<Vec<f64>>> {
    let mut cache = HashMap::new();
    let ea = embed_tokens(&a.types, provider, &mut cache)?;
    let eb = embed_tokens(&b.types, provider, &mut cache)?;
    ea.iter()
        .map(|u| eb.iter().map(|v| ground_distance(u, v)).collect())
        .collect()
}

fn require_tokens(doc: &TokenizedDoc, side: &str) -> Result<()> {
    if doc.is_empty() {
        return Err(Error::EmptyDoc(format!("{side} document has no tokens")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wmd {
    pub distance: f64,
    pub plan: TransportPlan,
}

/// Exact Word Mover's Distance between the bag-of-words distributions of
/// `a` (sources) and `b` (sinks).
pub fn wmd_exact(a: &TokenizedDoc, b: &TokenizedDoc, provider: &dyn EmbeddingProvider) -> Result<Wmd> {
    require_tokens(a, "first")?;
    require_tokens(b, "second")?;
    let cost = type_cost_matrix(a, b, provider)?;
    let plan = solve_transport(&a.weights, &b.weights, &cost)?;
    Ok(Wmd {
        distance: plan.total_cost.max(0.0),
        plan,
    })
}

/// Relaxed WMD: the larger of the two one-sided relaxations in which every
/// token ships all of its mass to its nearest counterpart. Never exceeds
/// [`wmd_exact`].
pub fn rwmd_lower_bound(a: &TokenizedDoc, b: &TokenizedDoc, provider: &dyn EmbeddingProvider) -> Result<f64> {
    require_tokens(a, "first")?;
    require_tokens(b, "second")?;
    let cost = type_cost_matrix(a, b, provider)?;
    let forward: f64 = a
        .weights
        .iter()
        .zip(&cost)
        .map(|(w, row)| w * row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let backward: f64 = b
        .weights
        .iter()
        .enumerate()
        .map(|(j, w)| w * cost.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(forward.max(backward))
}

/// Mean over candidate tokens of the best cosine to any reference token,
/// mapped to `[0, 1]`. Zero when either side is empty.
pub fn mover_similarity(
    reference: &TokenizedDoc,
    candidate: &TokenizedDoc,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if reference.is_empty() || candidate.is_empty() {
        return Ok(0.0);
    }
    let mut cache = HashMap::new();
    let refs = embed_tokens(&reference.types, provider, &mut cache)?;
    let cands = embed_tokens(&candidate.tokens, provider, &mut cache)?;
    let mut sum = 0.0;
    for c in &cands {
        let mut best = f64::NEG_INFINITY;
        for r in &refs {
            best = best.max(cosine(r, c)?);
        }
        sum += best;
    }
    let mean = sum / cands.len() as f64;
    Ok(((mean + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Persona inputs to the three-term reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersonaAgreement {
    pub selected: Vec<usize>,
    pub ground_truth: Vec<usize>,
    pub n_personas: usize,
}

impl PersonaAgreement {
    pub fn new(selected: Vec<usize>, ground_truth: Vec<usize>, n_personas: usize) -> Self {
        Self {
            selected,
            ground_truth,
            n_personas,
        }
    }

    /// `1 - persona_loss`.
    pub fn agreement(&self) -> Result<f64> {
        Ok(1.0 - persona_loss(&self.selected, &self.ground_truth, self.n_personas)?)
    }
}

/// Weighted sum of the three terms. Weights must pass three-term validation.
pub fn blend(weights: &RewardWeights, bleu_term: f64, mover_term: f64, persona_term: f64) -> Result<RewardBreakdown> {
    validate_weights(weights, WeightMode::ThreeTerm)?;
    for (name, v) in [
        ("bleu term", bleu_term),
        ("mover term", mover_term),
        ("persona term", persona_term),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::range(name, v.to_string()));
        }
    }
    let total = weights.alpha * bleu_term + weights.beta * mover_term + weights.gamma * persona_term;
    Ok(RewardBreakdown {
        bleu_term,
        mover_term,
        persona_term,
        total: total.clamp(0.0, 1.0),
    })
}

/// Two-term reward `α·bleu + (1-α)·mover`.
pub fn reward_two_term(
    reference: &TokenizedDoc,
    candidate: &TokenizedDoc,
    provider: &dyn EmbeddingProvider,
    alpha: f64,
    bleu_cfg: &BleuConfig,
) -> Result<RewardBreakdown> {
    let w = RewardWeights::two_term(alpha)?;
    let b = bleu(&reference.tokens, &candidate.tokens, bleu_cfg);
    let m = mover_similarity(reference, candidate, provider)?;
    let total = alpha * b + (1.0 - alpha) * m;
    debug_assert!((total - w.alpha * b - w.beta * m).abs() < 1e-12);
    Ok(RewardBreakdown {
        bleu_term: b,
        mover_term: m,
        persona_term: 0.0,
        total: total.clamp(0.0, 1.0),
    })
}

/// Three-term reward with persona agreement.
pub fn reward_three_term(
    reference: &TokenizedDoc,
    candidate: &TokenizedDoc,
    provider: &dyn EmbeddingProvider,
    persona: &PersonaAgreement,
    weights: &RewardWeights,
    bleu_cfg: &BleuConfig,
) -> Result<RewardBreakdown> {
    validate_weights(weights, WeightMode::ThreeTerm)?;
    let b = bleu(&reference.tokens, &candidate.tokens, bleu_cfg);
    let m = mover_similarity(reference, candidate, provider)?;
    blend(weights, b, m, persona.agreement()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub best: usize,
    pub rewards: Vec<RewardBreakdown>,
}

/// Scores every candidate against `reference` and returns the argmax; the
/// lowest index wins ties.
pub fn rerank_candidates(
    candidates: &[String],
    reference: &str,
    provider: &dyn EmbeddingProvider,
    weights: &RewardWeights,
    persona: &PersonaAgreement,
    bleu_cfg: &BleuConfig,
) -> Result<Reranked> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateList);
    }
    let reference = tokenize(reference);
    let rewards = candidates
        .iter()
        .map(|c| reward_three_term(&reference, &tokenize(c), provider, persona, weights, bleu_cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate().skip(1) {
        if r.total > rewards[best].total {
            best = i;
        }
    }
    Ok(Reranked { best, rewards })
}
