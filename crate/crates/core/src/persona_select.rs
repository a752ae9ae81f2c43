//! Persona selection: score each persona plus an explicit no-persona option,
//! then keep at most `max_selected` personas that beat both the threshold
//! and the no-persona score.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, embed_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{DialogHistory, Passage, PersonaSelection, PersonaSet};

/// Produces `n + 1` scores for `n` personas; the last is the no-persona
/// score.
pub trait PersonaScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, query: &str, knowledge: &[&Passage], personas: &PersonaSet) -> Result<Vec<f64>>;
}

/// Cosine between each persona and the pooled embedding of the query
/// followed by the top passage body. The no-persona score is a constant.
pub struct EmbeddingPersonaScorer<P> {
    provider: P,
    no_persona_baseline: f64,
}

impl<P: EmbeddingProvider> EmbeddingPersonaScorer<P> {
    pub fn new(provider: P, no_persona_baseline: f64) -> Self {
        Self {
            provider,
            no_persona_baseline,
        }
    }
}

/// Text the default scorer compares personas against.
pub fn persona_context(query: &str, knowledge: &[&Passage]) -> String {
    match knowledge.first() {
        Some(top) => format!("{query} {}", top.body),
        None => query.to_string(),
    }
}

impl<P: EmbeddingProvider> PersonaScorer for EmbeddingPersonaScorer<P> {
    fn name(&self) -> &str {
        "embedding"
    }

    fn score(&self, query: &str, knowledge: &[&Passage], personas: &PersonaSet) -> Result<Vec<f64>> {
        let ctx = embed_text(&persona_context(query, knowledge), &self.provider)?;
        let mut scores = Vec::with_capacity(personas.len() + 1);
        for p in personas.iter() {
            let e = embed_text(p, &self.provider)?;
            scores.push(cosine(&e.vector, &ctx.vector)?);
        }
        scores.push(self.no_persona_baseline);
        Ok(scores)
    }
}

/// Scores the personas against the last question of `history`.
pub fn score_personas(
    history: &DialogHistory,
    knowledge: &[&Passage],
    personas: &PersonaSet,
    scorer: &dyn PersonaScorer,
) -> Result<Vec<f64>> {
    let query = history.last_question()?;
    let scores = scorer.score(query, knowledge, personas)?;
    if scores.len() != personas.len() + 1 {
        return Err(Error::Length {
            expected: personas.len() + 1,
            actual: scores.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("persona scorer returned {bad}")));
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub threshold: f64,
    pub max_selected: usize,
    pub scorer: String,
    pub no_persona_baseline: f64,
    /// When set, candidates are drawn by seeded softmax sampling instead of
    /// taken in score order.
    pub sampling_seed: Option<u64>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            max_selected: 2,
            scorer: "embedding".into(),
            no_persona_baseline: 0.1,
            sampling_seed: None,
        }
    }
}

/// Personas scoring strictly above both the threshold and the no-persona
/// score, ordered by score then ascending index.
fn candidates(scores: &[f64], cfg: &SelectorConfig) -> Result<Vec<usize>> {
    let Some((&none, persona_scores)) = scores.split_last() else {
        return Err(Error::Length { expected: 1, actual: 0 });
    };
    let bar = cfg.threshold.max(none);
    let mut c: Vec<usize> = (0..persona_scores.len()).filter(|&i| persona_scores[i] > bar).collect();
    c.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(c)
}

/// Deterministic top-`max_selected` selection. `scores` holds one entry
/// per persona followed by the no-persona score.
pub fn select(scores: &[f64], n_personas: usize, cfg: &SelectorConfig) -> Result<PersonaSelection> {
    if scores.len() != n_personas + 1 {
        return Err(Error::Length {
            expected: n_personas + 1,
            actual: scores.len(),
        });
    }
    if let Some(seed) = cfg.sampling_seed {
        return select_sampled(scores, n_personas, cfg, seed);
    }
    let mut selected = candidates(scores, cfg)?;
    selected.truncate(cfg.max_selected);
    Ok(PersonaSelection {
        selected_indices: selected,
        scores: scores.to_vec(),
    })
}

/// Draws up to `max_selected` qualifying personas without replacement,
/// with probability proportional to `exp(score)`.
pub fn select_sampled(scores: &[f64], n_personas: usize, cfg: &SelectorConfig, seed: u64) -> Result<PersonaSelection> {
    if scores.len() != n_personas + 1 {
        return Err(Error::Length {
            expected: n_personas + 1,
            actual: scores.len(),
        });
    }
    let mut pool = candidates(scores, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    while selected.len() < cfg.max_selected && !pool.is_empty() {
        let top = pool.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pool.iter().map(|&i| (scores[i] - top).exp()).collect();
        let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
        let mut pick = pool.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            if u < *w {
                pick = j;
                break;
            }
            u -= w;
        }
        selected.push(pool.remove(pick));
    }
    Ok(PersonaSelection {
        selected_indices: selected,
        scores: scores.to_vec(),
    })
}

fn index_set(indices: &[usize], n: usize, what: &'static str) -> Result<BTreeSet<usize>> {
    indices
        .iter()
        .map(|&i| {
            if i < n {
                Ok(i)
            } else {
                Err(Error::range(what, format!("{i} with {n} personas")))
            }
        })
        .collect()
}

/// Jaccard dissimilarity between the selected and ground-truth persona
/// sets. Two empty sets agree perfectly (loss 0).
pub fn persona_loss(selected: &[usize], ground_truth: &[usize], n_personas: usize) -> Result<f64> {
    let a = index_set(selected, n_personas, "selected persona index")?;
    let b = index_set(ground_truth, n_personas, "ground persona index")?;
    let union = a.union(&b).count();
    if union == 0 {
        return Ok(0.0);
    }
    let inter = a.intersection(&b).count();
    Ok(1.0 - inter as f64 / union as f64)
}

/// Cross-entropy between the softmax of the `n + 1` scores and the target
/// distribution: uniform over the ground-truth personas, or all mass on
/// the no-persona slot when the ground truth is empty.
pub fn persona_cross_entropy(scores: &[f64], ground_truth: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Length { expected: 1, actual: 0 });
    }
    let n = scores.len() - 1;
    let gt = index_set(ground_truth, n, "ground persona index")?;
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + scores.iter().map(|s| (s - top).exp()).sum::<f64>().ln();
    if gt.is_empty() {
        return Ok(log_z - scores[n]);
    }
    let share = 1.0 / gt.len() as f64;
    Ok(gt.iter().map(|&i| share * (log_z - scores[i])).sum())
}
