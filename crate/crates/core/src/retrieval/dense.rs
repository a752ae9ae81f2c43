//! Dense passage index and exact maximum-inner-product search.
//!
//! Binary layout (all integers little-endian, version 1):
//!
//! ```text
//! magic    b"KPXI"
//! version  u32
//! dim      u32
//! count    u32
//! seed     u64
//! embedder u32 length + UTF-8 bytes
//! rows     count × (u32 id length + UTF-8 id, dim × f64)
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a write/read round trip is
//! bit-exact.

use std::collections::HashSet;

use crate::embeddings::{dot, embed_text, l2_norm, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{RetrievedKnowledge, ScoredPassage};

use super::lexical::{check_k, Corpus};

pub const DENSE_MAGIC: &[u8; 4] = b"KPXI";
pub const DENSE_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-9;

/// Unit-normalized passage vectors, one row per passage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f64>,
    seed: u64,
    embedder: String,
}

impl DenseIndex {
    /// Builds from raw vectors, normalizing each row. Zero rows are rejected.
    pub fn from_vectors(
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        seed: u64,
        embedder: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Length {
                expected: ids.len(),
                actual: vectors.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(dim * vectors.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            let n = l2_norm(v);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::EmptyDoc(format!("passage `{id}` has a zero embedding")));
            }
            rows.extend(v.iter().map(|x| x / n));
        }
        Ok(Self {
            dim,
            ids,
            rows,
            seed,
            embedder: embedder.into(),
        })
    }

    /// Embeds every corpus passage with `provider`.
    pub fn build<P: EmbeddingProvider + ?Sized>(corpus: &Corpus, provider: &P, seed: u64) -> Result<Self> {
        let mut ids = Vec::with_capacity(corpus.len());
        let mut vectors = Vec::with_capacity(corpus.len());
        for p in corpus.passages() {
            let e = embed_text(&p.body, provider)?;
            if e.empty {
                return Err(Error::EmptyDoc(format!("passage `{}` has no tokens", p.id)));
            }
            ids.push(p.id.clone());
            vectors.push(e.vector);
        }
        let mut index = Self::from_vectors(ids, vectors, seed, provider.name())?;
        index.dim = provider.dim();
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Top-k rows of `candidates` by inner product with `query`.
    pub(crate) fn top_k(&self, query: &[f64], candidates: impl Iterator<Item = usize>, k: usize) -> RetrievedKnowledge {
        let mut scored: Vec<(usize, f64)> = candidates.map(|i| (i, dot(self.row(i), query))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        scored.truncate(k);
        RetrievedKnowledge {
            entries: scored
                .into_iter()
                .map(|(i, score)| ScoredPassage {
                    id: self.ids[i].clone(),
                    score,
                })
                .collect(),
            k,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.rows.len() * 8 + self.ids.len() * 16);
        out.extend_from_slice(DENSE_MAGIC);
        out.extend_from_slice(&DENSE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.embedder);
        for (i, id) in self.ids.iter().enumerate() {
            put_str(&mut out, id);
            for x in self.row(i) {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    /// Decodes the binary layout, validating every field. Never panics on
    /// malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dense index");
        let magic = r.take(4)?;
        if magic != DENSE_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u32()?;
        if version != DENSE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let seed = r.u64()?;
        let embedder = r.string()?;
        if count > 0 && dim == 0 {
            return Err(r.error("zero dimension with non-empty index"));
        }
        // Each row needs at least 4 + 8·dim bytes.
        let min_row = 4usize.saturating_add(dim.saturating_mul(8));
        if count.saturating_mul(min_row) > r.remaining() {
            return Err(r.error("row count exceeds payload"));
        }
        let mut ids = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count * dim);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let id = r.string()?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            let start = rows.len();
            for _ in 0..dim {
                rows.push(f64::from_bits(r.u64()?));
            }
            let norm = l2_norm(&rows[start..]);
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(r.error(format!("row `{id}` is not unit length")));
            }
            ids.push(id);
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            dim,
            ids,
            rows,
            seed,
            embedder,
        })
    }
}

/// Exact top-k by inner product; ties go to the smaller id.
pub fn mips_exact(index: &DenseIndex, query: &[f64], k: usize) -> Result<RetrievedKnowledge> {
    check_k(k)?;
    index.check_query(query)?;
    Ok(index.top_k(query, 0..index.len(), k))
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.what, self.pos, msg)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::HashEmbedder;
    use crate::model::Passage;
    use crate::retrieval::lexical::build_corpus;

    fn toy() -> DenseIndex {
        DenseIndex::from_vectors(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]],
            3,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn stored_row_ranks_first() {
        let idx = toy();
        let r = mips_exact(&idx, idx.row(1), 2).unwrap();
        assert_eq!(r.entries[0].id, "b");
        assert!((r.entries[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_k_returns_everything_sorted() {
        let idx = toy();
        let r = mips_exact(&idx, &[1.0, 0.0], 10).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["a", "c", "b"]);
    }

    #[test]
    fn dim_mismatch() {
        assert!(matches!(mips_exact(&toy(), &[1.0], 1), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = build_corpus(vec![
            Passage::new("p1", "t", "the quick brown fox").unwrap(),
            Passage::new("p2", "t", "lazy dogs sleep").unwrap(),
        ])
        .unwrap();
        let idx = DenseIndex::build(&c, &HashEmbedder::new(7, 9).unwrap(), 9).unwrap();
        let bytes = idx.to_bytes();
        let back = DenseIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.embedder(), "hash:7:9");
    }

    #[test]
    fn truncated_and_corrupt_inputs_rejected() {
        let bytes = toy().to_bytes();
        for cut in 0..bytes.len() {
            assert!(DenseIndex::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DenseIndex::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(DenseIndex::from_bytes(&extra).is_err());
    }

    #[test]
    fn zero_vector_rejected() {
        let err = DenseIndex::from_vectors(vec!["a".into()], vec![vec![0.0, 0.0]], 0, "t").unwrap_err();
        assert!(matches!(err, Error::EmptyDoc(_)));
    }
}
