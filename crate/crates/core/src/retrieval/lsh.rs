//! Random-hyperplane (SimHash) LSH over a [`DenseIndex`].
//!
//! Each of the `L` tables draws `b` Gaussian hyperplanes; a vector's
//! signature is the sign pattern of its projections. Hyperplanes for all
//! tables come from one ChaCha stream seeded by `seed`, so the first `L`
//! tables of an index built with more tables are identical to an index
//! built with exactly `L`.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::dot;
use crate::error::{Error, Result};
use crate::model::RetrievedKnowledge;

use super::dense::DenseIndex;
use super::lexical::check_k;

#[derive(Debug, Clone)]
struct Table {
    planes: Vec<f64>,
    buckets: HashMap<u64, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct LshIndex {
    tables: Vec<Table>,
    bits: usize,
    dim: usize,
    seed: u64,
}

/// Approximate search result with the size of the rescored candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct LshResult {
    pub knowledge: RetrievedKnowledge,
    pub candidates: usize,
}

impl LshIndex {
    pub fn build(index: &DenseIndex, tables: usize, bits: usize, seed: u64) -> Result<Self> {
        if tables == 0 {
            return Err(Error::range("lsh tables", "must be at least 1"));
        }
        if bits > 64 {
            return Err(Error::range("lsh bits", format!("{bits} > 64")));
        }
        let dim = index.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(tables);
        for _ in 0..tables {
            let planes: Vec<f64> = (0..bits * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut table = Table {
                planes,
                buckets: HashMap::new(),
            };
            for row in 0..index.len() {
                let sig = signature(&table.planes, bits, dim, index.row(row));
                table.buckets.entry(sig).or_default().push(row);
            }
            out.push(table);
        }
        Ok(Self {
            tables: out,
            bits,
            dim,
            seed,
        })
    }

    pub fn tables(&self) -> usize {
        self.tables.len()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Signature of `v` in table `t`.
    pub fn signature(&self, t: usize, v: &[f64]) -> u64 {
        signature(&self.tables[t].planes, self.bits, self.dim, v)
    }

    /// Rows sharing a bucket with `v` in table `t`.
    pub fn bucket(&self, t: usize, v: &[f64]) -> &[usize] {
        self.tables[t]
            .buckets
            .get(&self.signature(t, v))
            .map_or(&[], Vec::as_slice)
    }

    /// Number of (table, row) memberships; equals `tables × rows`.
    pub fn total_memberships(&self) -> usize {
        self.tables
            .iter()
            .map(|t| t.buckets.values().map(Vec::len).sum::<usize>())
            .sum()
    }
}

fn signature(planes: &[f64], bits: usize, dim: usize, v: &[f64]) -> u64 {
    let mut sig = 0u64;
    for b in 0..bits {
        if dot(&planes[b * dim..(b + 1) * dim], v) >= 0.0 {
            sig |= 1 << b;
        }
    }
    sig
}

/// Unions the query's bucket across all tables, rescoring candidates
/// exactly.
pub fn lsh_query(lsh: &LshIndex, index: &DenseIndex, query: &[f64], k: usize) -> Result<LshResult> {
    check_k(k)?;
    index.check_query(query)?;
    if lsh.dim != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            actual: lsh.dim,
        });
    }
    let mut candidates = BTreeSet::new();
    for t in 0..lsh.tables.len() {
        candidates.extend(lsh.bucket(t, query).iter().copied().filter(|&r| r < index.len()));
    }
    let n = candidates.len();
    Ok(LshResult {
        knowledge: index.top_k(query, candidates.into_iter(), k),
        candidates: n,
    })
}
