//! Token and text embeddings.
//!
//! Two providers ship with the engine: [`HashEmbedder`], a deterministic
//! pseudo-random embedder used for desk-scale runs and tests, and
//! [`StoreEmbedder`], which serves precomputed vectors loaded from a text
//! file with the layout
//!
//! ```text
//! # comment
//! <token>\t<f1> <f2> ... <fd>
//! ```
//!
//! Text embeddings are the renormalized mean of token vectors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::tokens;

/// Source of token vectors. Implementations must be deterministic: the same
/// token always maps to the same vector of exactly `dim()` components.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_token(&self, token: &str) -> Result<Vec<f64>>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        (**self).embed_token(token)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        (**self).embed_token(token)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic unit vector for `token`, derived only from
/// `(token, dim, seed)`.
pub fn hash_embed(token: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 1 {
        return Err(Error::Dim("embedding dimension must be at least 1".into()));
    }
    let key = splitmix64(fnv1a64(token.as_bytes()) ^ splitmix64(seed) ^ (dim as u64).rotate_left(32));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return Ok(v);
        }
    }
}

/// Pseudo-random embedder backed by [`hash_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::Dim("embedding dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            seed,
            name: format!("hash:{dim}:{seed}"),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        hash_embed(token, self.dim, self.seed)
    }
}

/// Memoizes another provider's token vectors, shared across threads.
/// Stops adding entries once `capacity` tokens are cached.
pub struct CachingEmbedder<P> {
    inner: P,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
    capacity: usize,
}

impl<P: EmbeddingProvider> CachingEmbedder<P> {
    pub fn new(inner: P, capacity: usize) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
            capacity,
        }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachingEmbedder<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.read().unwrap_or_else(|e| e.into_inner()).get(token) {
            return Ok(v.to_vec());
        }
        let v = self.inner.embed_token(token)?;
        let mut cache = self.cache.write().unwrap_or_else(|e| e.into_inner());
        if cache.len() < self.capacity {
            cache.insert(token.to_string(), v.as_slice().into());
        }
        Ok(v)
    }
}

/// Precomputed token vectors keyed by canonical (lowercased) token.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    vectors: HashMap<String, Vec<f64>>,
    dim: Option<usize>,
    source: Option<PathBuf>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Dimension, fixed by the first inserted vector.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.is_empty() {
            return Err(Error::Dim(format!("vector for `{token}` is empty")));
        }
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::Dim(format!(
                    "vector for `{token}` has {} components, store dimension is {d}",
                    vector.len()
                )))
            }
            _ => self.dim = Some(vector.len()),
        }
        self.vectors.insert(token.to_lowercase(), vector);
        Ok(())
    }
}

/// Parses the line-oriented store format. `source_name` labels errors.
pub fn parse_store(text: &str, source_name: &str) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (token, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source_name, line_no, "expected `<token>\\t<values>`"))?;
        if token.is_empty() {
            return Err(Error::parse(source_name, line_no, "empty token"));
        }
        let mut vector = Vec::new();
        for field in values.split_whitespace() {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::parse(source_name, line_no, format!("bad real `{field}`")))?;
            if !x.is_finite() {
                return Err(Error::parse(source_name, line_no, format!("non-finite real `{field}`")));
            }
            vector.push(x);
        }
        if vector.is_empty() {
            return Err(Error::parse(source_name, line_no, "no vector components"));
        }
        let key = token.to_lowercase();
        if store.vectors.contains_key(&key) {
            return Err(Error::parse(source_name, line_no, format!("duplicate token `{token}`")));
        }
        if let Some(d) = store.dim {
            if d != vector.len() {
                return Err(Error::Dim(format!(
                    "{source_name}:{line_no}: row `{token}` has {} components, expected {d}",
                    vector.len()
                )));
            }
        }
        store.insert(&key, vector)?;
    }
    Ok(store)
}

/// Loads a store file from disk.
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut store = parse_store(&text, &path.display().to_string())?;
    store.source = Some(path.to_path_buf());
    Ok(store)
}

/// What a store-backed provider does with tokens it has no vector for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovPolicy {
    Error,
    HashFallback { seed: u64 },
}

/// Provider serving vectors from an [`EmbeddingStore`].
#[derive(Debug, Clone)]
pub struct StoreEmbedder {
    store: Arc<EmbeddingStore>,
    dim: usize,
    policy: OovPolicy,
    name: String,
}

impl StoreEmbedder {
    pub fn new(store: EmbeddingStore, policy: OovPolicy) -> Result<Self> {
        let dim = store
            .dim()
            .ok_or_else(|| Error::Dim("embedding store is empty; dimension undefined".into()))?;
        let name = match store.source() {
            Some(p) => format!("store:{}", p.display()),
            None => "store".to_string(),
        };
        Ok(Self {
            store: Arc::new(store),
            dim,
            policy,
            name,
        })
    }
}

impl EmbeddingProvider for StoreEmbedder {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.store.get(token) {
            return Ok(v.to_vec());
        }
        match self.policy {
            OovPolicy::Error => Err(Error::MissingToken(token.to_string())),
            OovPolicy::HashFallback { seed } => hash_embed(token, self.dim, seed),
        }
    }
}

/// A pooled text vector. `empty` is set when the text had no tokens, in
/// which case `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub empty: bool,
}

/// Mean of the token vectors of `text`, renormalized to unit length.
pub fn embed_text<P: EmbeddingProvider + ?Sized>(text: &str, provider: &P) -> Result<TextEmbedding> {
    let toks = tokens(text);
    let dim = provider.dim();
    let mut acc = vec![0.0; dim];
    if toks.is_empty() {
        return Ok(TextEmbedding {
            vector: acc,
            empty: true,
        });
    }
    for t in &toks {
        let v = provider.embed_token(t)?;
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
    }
    let n = toks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let norm = l2_norm(&acc);
    if norm > 0.0 {
        acc.iter_mut().for_each(|a| *a /= norm);
    }
    Ok(TextEmbedding {
        vector: acc,
        empty: false,
    })
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`. A zero operand yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Vectors for each token of a sequence, memoized per distinct token.
pub(crate) fn embed_tokens<P: EmbeddingProvider + ?Sized>(
    toks: &[String],
    provider: &P,
    cache: &mut HashMap<String, Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    toks.iter()
        .map(|t| {
            if let Some(v) = cache.get(t) {
                return Ok(v.clone());
            }
            let v = provider.embed_token(t)?;
            cache.insert(t.clone(), v.clone());
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn hash_embed_is_deterministic_and_unit() {
        let a = hash_embed("paris", 16, 7).unwrap();
        assert_eq!(a, hash_embed("paris", 16, 7).unwrap());
        assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        assert_ne!(hash_embed("a", 8, 7).unwrap(), hash_embed("b", 8, 7).unwrap());
        assert_ne!(hash_embed("a", 8, 7).unwrap(), hash_embed("a", 8, 8).unwrap());
    }

    #[test]
    fn caching_is_transparent() {
        let plain = HashEmbedder::new(16, 3).unwrap();
        let cached = CachingEmbedder::new(HashEmbedder::new(16, 3).unwrap(), 1);
        assert_eq!(cached.name(), plain.name());
        for t in ["x", "y", "x", "y"] {
            assert_eq!(cached.embed_token(t).unwrap(), plain.embed_token(t).unwrap());
        }
    }

    #[test]
    fn hash_embed_rejects_zero_dim() {
        assert!(matches!(hash_embed("a", 0, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn hash_embed_dim_one_is_sign() {
        let v = hash_embed("x", 1, 3).unwrap();
        assert_eq!(v[0].abs(), 1.0);
    }

    #[test]
    fn hash_embed_near_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0.0;
        for _ in 0..1000 {
            let a = format!("tok{}", rng.random::<u32>());
            let b = format!("tok{}", rng.random::<u32>());
            let c = cosine(&hash_embed(&a, 64, 1).unwrap(), &hash_embed(&b, 64, 1).unwrap()).unwrap();
            total += c.abs();
        }
        assert!(total / 1000.0 < 0.2, "mean |cos| = {}", total / 1000.0);
    }

    #[test]
    fn embed_text_single_token_is_token_vector() {
        let p = HashEmbedder::new(12, 5).unwrap();
        let t = embed_text("Lake", &p).unwrap();
        let v = p.embed_token("lake").unwrap();
        for (a, b) in t.vector.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_text_empty_is_flagged_zero() {
        let p = HashEmbedder::new(4, 5).unwrap();
        let t = embed_text("  ?! ", &p).unwrap();
        assert!(t.empty);
        assert_eq!(t.vector, vec![0.0; 4]);
    }

    #[test]
    fn embed_text_two_tokens_is_normalized_mean() {
        let p = HashEmbedder::new(8, 2).unwrap();
        let u = p.embed_token("red").unwrap();
        let v = p.embed_token("fox").unwrap();
        let mean: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (a + b) / 2.0).collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let t = embed_text("red fox", &p).unwrap();
        for (a, b) in t.vector.iter().zip(&mean) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn store_parses_rows_and_comments() {
        let s = parse_store("# vectors\na\t1 0 0\nb\t0 1 0\n\nc\t0 0 1\n", "t").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dim(), Some(3));
        assert_eq!(s.get("b"), Some(&[0.0, 1.0, 0.0][..]));
    }

    #[test]
    fn store_rejects_wrong_dimension_row() {
        let err = parse_store("a\t1 0 0\nb\t0 1\n", "t").unwrap_err();
        match err {
            Error::Dim(msg) => assert!(msg.contains(":2") && msg.contains("`b`"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn store_reports_parse_line() {
        let err = parse_store("a\t1 0\nb 0 1\n", "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_store("a\t1 x\n", "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_store_has_no_dim() {
        let s = parse_store("", "t").unwrap();
        assert!(s.is_empty());
        assert_eq!(s.dim(), None);
        assert!(StoreEmbedder::new(s, OovPolicy::Error).is_err());
    }

    #[test]
    fn store_oov_policies() {
        let store = parse_store("known\t0.6 0.8\n", "t").unwrap();
        let strict = StoreEmbedder::new(store.clone(), OovPolicy::Error).unwrap();
        assert_eq!(strict.embed_token("known").unwrap(), vec![0.6, 0.8]);
        assert!(matches!(strict.embed_token("other"), Err(Error::MissingToken(_))));
        let lenient = StoreEmbedder::new(store, OovPolicy::HashFallback { seed: 3 }).unwrap();
        assert_eq!(
            lenient.embed_token("other").unwrap(),
            hash_embed("other", 2, 3).unwrap()
        );
    }

    #[test]
    fn load_store_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsv");
        std::fs::write(&path, "x\t1 2\ny\t3 4\nz\t5 6\n").unwrap();
        let s = load_store(&path).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.source(), Some(path.as_path()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn self_cosine_is_one(text in "[a-z]{1,8}( [a-z]{1,8}){0,6}", seed in 0u64..1000) {
                let p = HashEmbedder::new(16, seed).unwrap();
                let e = embed_text(&text, &p).unwrap();
                prop_assert!((cosine(&e.vector, &e.vector).unwrap() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn parse_store_never_panics(s in "\\PC{0,200}") {
                let _ = parse_store(&s, "fuzz");
            }
        }
    }
}
