//! Single-file index bundle: corpus, embedder description and dense index.
//!
//! Layout (integers little-endian): magic `KPXB`, `u32` version, embedder
//! description as a `u32`-length-prefixed JSON string, corpus JSON Lines as
//! a `u64`-length-prefixed string, dense index bytes `u64`-length-prefixed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Passage;
use crate::retrieval::{build_corpus, corpus_to_jsonl, parse_corpus_jsonl, put_str, ByteReader, Corpus, DenseIndex};

use super::config::EmbedderSection;

pub const BUNDLE_MAGIC: &[u8; 4] = b"KPXB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct IndexBundle {
    pub embedder: EmbedderSection,
    pub passages: Vec<Passage>,
    pub dense: DenseIndex,
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn blob<'a>(r: &mut ByteReader<'a>) -> Result<&'a [u8]> {
    let n = r.u64()?;
    if n > r.remaining() as u64 {
        return Err(r.error("section length exceeds data"));
    }
    r.take(n as usize)
}

impl IndexBundle {
    /// Embeds every passage with the described embedder.
    pub fn build(embedder: EmbedderSection, passages: Vec<Passage>, seed: u64) -> Result<Self> {
        let provider = embedder.build()?;
        let corpus = build_corpus(passages.clone())?;
        let dense = DenseIndex::build(&corpus, &*provider, seed)?;
        Ok(Self {
            embedder,
            passages,
            dense,
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        build_corpus(self.passages.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        put_str(
            &mut out,
            &serde_json::to_string(&self.embedder).expect("embedder serializes"),
        );
        put_blob(&mut out, corpus_to_jsonl(&self.passages).as_bytes());
        put_blob(&mut out, &self.dense.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "index bundle");
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let embedder: EmbedderSection =
            serde_json::from_str(&r.string()?).map_err(|e| r.error(format!("embedder description: {e}")))?;
        let corpus_text = std::str::from_utf8(blob(&mut r)?).map_err(|_| r.error("corpus section is not UTF-8"))?;
        let passages = parse_corpus_jsonl(corpus_text, "index bundle corpus")?;
        let dense = DenseIndex::from_bytes(blob(&mut r)?)?;
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes"));
        }
        if dense.ids().len() != passages.len() || dense.ids().iter().zip(&passages).any(|(a, p)| *a != p.id) {
            return Err(Error::Invalid(
                "index bundle: dense index rows do not match the corpus".into(),
            ));
        }
        Ok(Self {
            embedder,
            passages,
            dense,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
