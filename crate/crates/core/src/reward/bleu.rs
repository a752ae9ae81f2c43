//! Sentence- and corpus-level BLEU from clipped n-gram counts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero match counts are replaced by `epsilon`.
    AddEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub epsilon: f64,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::None,
            epsilon: 1e-9,
        }
    }
}

impl BleuConfig {
    pub fn smoothed() -> Self {
        Self {
            smoothing: Smoothing::AddEpsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_n < 1 {
            return Err(Error::Config("bleu max_n must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("bleu epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Clipped n-gram match counts and candidate n-gram totals for orders
/// `1..=max_n`, plus the two lengths. Sums of stats give corpus BLEU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub cand_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn zero(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            cand_len: 0,
            ref_len: 0,
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }
}

pub(crate) fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

pub fn bleu_stats<S: AsRef<str>>(reference: &[S], candidate: &[S], max_n: usize) -> BleuStats {
    let mut stats = BleuStats::zero(max_n);
    stats.cand_len = candidate.len() as u64;
    stats.ref_len = reference.len() as u64;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        stats.totals[n - 1] = cand.values().sum();
        stats.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

/// BLEU from accumulated statistics.
///
/// The geometric mean runs over the orders for which the candidate has at
/// least one n-gram, so a candidate shorter than `max_n` tokens is scored
/// on the orders it can express. Brevity penalty is
/// `min(1, exp(1 - ref_len / cand_len))`; an empty candidate scores 0.
pub fn bleu_from_stats(stats: &BleuStats, cfg: &BleuConfig) -> f64 {
    if stats.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for (&m, &t) in stats.matches.iter().zip(&stats.totals) {
        if t == 0 {
            continue;
        }
        let m = if m == 0 {
            match cfg.smoothing {
                Smoothing::None => return 0.0,
                Smoothing::AddEpsilon => cfg.epsilon,
            }
        } else {
            m as f64
        };
        log_sum += (m / t as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let bp = if stats.cand_len >= stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.cand_len as f64).exp()
    };
    (bp * (log_sum / orders as f64).exp()).clamp(0.0, 1.0)
}

/// Sentence BLEU of `candidate` against `reference` (token sequences).
pub fn bleu<S: AsRef<str>>(reference: &[S], candidate: &[S], cfg: &BleuConfig) -> f64 {
    bleu_from_stats(&bleu_stats(reference, candidate, cfg.max_n), cfg)
}
