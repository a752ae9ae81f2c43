//! Domain types shared by every stage of the engine.
//!
//! Everything here is immutable once built. Cross-module references to
//! personas go through indices into a [`PersonaSet`], never through persona
//! strings.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the `alpha + beta + gamma = 1` constraint.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// One question/response exchange of a dialog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub question: String,
    pub response: String,
    /// Ground-truth persona indices; empty for a generic turn.
    pub ground_persona_indices: Vec<usize>,
    pub ground_knowledge_id: Option<String>,
}

impl Utterance {
    pub fn new(
        question: impl Into<String>,
        response: impl Into<String>,
        ground_persona_indices: Vec<usize>,
        ground_knowledge_id: Option<String>,
    ) -> Result<Self> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(Error::Invalid("utterance question is empty".into()));
        }
        let mut seen = HashSet::new();
        for &i in &ground_persona_indices {
            if !seen.insert(i) {
                return Err(Error::Invalid(format!("ground persona index {i} repeated")));
            }
        }
        Ok(Self {
            question,
            response: response.into(),
            ground_persona_indices,
            ground_knowledge_id,
        })
    }

    /// Checks the persona indices against a persona set of size `n`.
    pub fn check_personas(&self, n: usize) -> Result<()> {
        match self.ground_persona_indices.iter().find(|&&i| i >= n) {
            Some(i) => Err(Error::range("ground persona index", format!("{i} with {n} personas"))),
            None => Ok(()),
        }
    }
}

/// Ordered history of exchanges on a single topic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogHistory {
    pub topic: String,
    pub utterances: Vec<Utterance>,
}

impl DialogHistory {
    pub fn new(topic: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Self {
            topic: topic.into(),
            utterances,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The latest question; errors on an empty history.
    pub fn last_question(&self) -> Result<&str> {
        self.utterances
            .last()
            .map(|u| u.question.as_str())
            .ok_or_else(|| Error::Invalid("dialog history is empty".into()))
    }

    /// The question before the latest one, if any.
    pub fn previous_question(&self) -> Option<&str> {
        let n = self.utterances.len();
        (n >= 2).then(|| self.utterances[n - 2].question.as_str())
    }
}

/// The user's persona statements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonaSet {
    personas: Vec<String>,
}

impl PersonaSet {
    pub fn new(personas: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &personas {
            if p.trim().is_empty() {
                return Err(Error::Invalid("persona text is empty".into()));
            }
            if !seen.insert(p.as_str()) {
                return Err(Error::Invalid(format!("persona `{p}` repeated")));
            }
        }
        Ok(Self { personas })
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.personas.get(index).map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.personas
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.personas.iter().map(String::as_str)
    }
}

/// Outcome of persona selection. An empty `selected_indices` is the
/// no-persona outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersonaSelection {
    /// Selected persona indices in rank order.
    pub selected_indices: Vec<usize>,
    /// One score per persona followed by the no-persona score.
    pub scores: Vec<f64>,
}

impl PersonaSelection {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_no_persona(&self) -> bool {
        self.selected_indices.is_empty()
    }
}

/// A unit of the knowledge corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub topic: String,
    pub body: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, topic: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let p = Self {
            id: id.into(),
            topic: topic.into(),
            body: body.into(),
        };
        if p.body.trim().is_empty() {
            return Err(Error::Invalid(format!("passage `{}` has an empty body", p.id)));
        }
        Ok(p)
    }
}

/// A retrieved passage id with its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub id: String,
    pub score: f64,
}

/// Ranked top-k retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedKnowledge {
    pub entries: Vec<ScoredPassage>,
    pub k: usize,
}

impl RetrievedKnowledge {
    /// Builds a result from entries already in rank order, truncating to `k`.
    ///
    /// Rejects increasing scores and duplicate ids.
    pub fn from_ranked(mut entries: Vec<ScoredPassage>, k: usize) -> Result<Self> {
        entries.truncate(k);
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if i > 0 && e.score > entries[i - 1].score {
                return Err(Error::Invalid(format!("retrieval scores increase at rank {i}")));
            }
        }
        Ok(Self { entries, k })
    }

    pub fn empty(k: usize) -> Self {
        Self { entries: Vec::new(), k }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }
}

/// Which reward blend the weights are meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// BLEU and mover term only; `beta = 1 - alpha`, `gamma = 0`.
    TwoTerm,
    /// BLEU, mover term and persona agreement.
    ThreeTerm,
}

/// Reward blend weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
        }
    }
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// Two-term weights: `(alpha, 1 - alpha, 0)`.
    pub fn two_term(alpha: f64) -> Result<Self> {
        let w = Self::new(alpha, 1.0 - alpha, 0.0);
        w.validate(WeightMode::TwoTerm)?;
        Ok(w)
    }

    pub fn validate(&self, mode: WeightMode) -> Result<()> {
        validate_weights(self, mode)
    }
}

/// Accepts the weights iff they satisfy the constraints of `mode`.
///
/// In two-term mode only `alpha` is meaningful; `beta` and `gamma` are implied
/// as `1 - alpha` and `0`, so only the range of `alpha` is checked.
pub fn validate_weights(w: &RewardWeights, mode: WeightMode) -> Result<()> {
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    match mode {
        WeightMode::TwoTerm => {
            if !in_unit(w.alpha) {
                return Err(Error::range("alpha", w.alpha.to_string()));
            }
        }
        WeightMode::ThreeTerm => {
            for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma)] {
                if !in_unit(v) {
                    return Err(Error::range(name, v.to_string()));
                }
            }
            let sum = w.alpha + w.beta + w.gamma;
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::WeightSum { sum });
            }
        }
    }
    Ok(())
}

/// Per-term reward values and their weighted total for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub bleu_term: f64,
    pub mover_term: f64,
    pub persona_term: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn recompute_total(&self, w: &RewardWeights) -> f64 {
        w.alpha * self.bleu_term + w.beta * self.mover_term + w.gamma * self.persona_term
    }
}

/// A tokenized text: the token sequence plus its normalized bag of words.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    /// Tokens in text order.
    pub tokens: Vec<String>,
    /// Distinct tokens in order of first occurrence.
    pub types: Vec<String>,
    /// Relative frequency of each entry of `types`; sums to 1.
    pub weights: Vec<f64>,
}

impl TokenizedDoc {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut types = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for t in &tokens {
            match index.get(t.as_str()) {
                Some(&i) => counts[i] += 1,
                None => {
                    index.insert(t, types.len());
                    types.push(t.clone());
                    counts.push(1);
                }
            }
        }
        let total = tokens.len() as f64;
        let weights = counts.iter().map(|&c| c as f64 / total).collect();
        Self { tokens, types, weights }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined with single spaces.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Canonical tokenizer: Unicode lowercase, split on runs of
/// non-alphanumeric characters. Numerals are kept as tokens.
pub fn tokenize(text: &str) -> TokenizedDoc {
    TokenizedDoc::from_tokens(tokens(text))
}

/// Token sequence of `text` without building the bag of words.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}
