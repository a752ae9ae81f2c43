//! Checks shared by the fuzz targets and the seed replay test in the core crate.
//! Each takes raw input, must never panic on it, and asserts round trips where
//! the format has a writer.

use kperm_core::dataset::{convert_focus_json, dialogs_to_jsonl, parse_dialogs_jsonl, Dataset};
use kperm_core::embeddings::parse_store;
use kperm_core::generation::{parse_chat_response, PromptMode};
use kperm_core::metrics::split_sentences;
use kperm_core::model::tokenize;
use kperm_core::pipeline::{EmbedderSection, EvalMode, IndexBundle, PipelineConfig};
use kperm_core::retrieval::{build_corpus, corpus_to_jsonl, mips_exact, parse_corpus_jsonl, DenseIndex, Stage1Method};

pub fn embedding_store(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(store) = parse_store(s, "fuzz") {
        assert_eq!(store.dim().is_some(), !store.is_empty());
    }
}

pub fn corpus_jsonl(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(passages) = parse_corpus_jsonl(s, "fuzz") else {
        return;
    };
    let again = parse_corpus_jsonl(&corpus_to_jsonl(&passages), "fuzz").expect("own output parses");
    assert_eq!(again, passages);
    let _ = build_corpus(passages);
}

pub fn dialogs_jsonl(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(dialogs) = parse_dialogs_jsonl(s, "fuzz", "all") else {
        return;
    };
    let again = parse_dialogs_jsonl(&dialogs_to_jsonl(&dialogs), "fuzz", "all").expect("own output parses");
    assert_eq!(again, dialogs);
}

pub fn dense_index(data: &[u8]) {
    let Ok(idx) = DenseIndex::from_bytes(data) else { return };
    assert_eq!(idx.to_bytes(), data);
    if idx.dim() > 0 && !idx.is_empty() {
        let q = idx.row(0).to_vec();
        let _ = mips_exact(&idx, &q, 3);
    }
}

pub fn index_bundle(data: &[u8]) {
    let Ok(bundle) = IndexBundle::from_bytes(data) else {
        return;
    };
    let bytes = bundle.to_bytes();
    let again = IndexBundle::from_bytes(&bytes).expect("own output decodes");
    assert_eq!(again.to_bytes(), bytes);
}

pub fn pipeline_config(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = PipelineConfig::from_toml_str(s) {
        let again = PipelineConfig::from_toml_str(&cfg.to_toml_string()).expect("own output parses");
        assert_eq!(again, cfg);
    }
    // Also read the input as `--set key=value` lines.
    let overrides: Vec<String> = s.lines().take(8).map(str::to_string).collect();
    let _ = PipelineConfig::from_toml_with_overrides("", &overrides);
}

pub fn chat_response(data: &[u8]) {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_chat_response(s);
    }
}

pub fn focus_json(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok((dialogs, passages)) = convert_focus_json(s, "train") {
        let _ = Dataset::new(dialogs, passages);
    }
}

/// Short textual specs from the command line, plus the tokenizer and sentence splitter.
pub fn specs(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(mode) = s.parse::<EvalMode>() {
        assert_eq!(mode.to_string().parse::<EvalMode>().unwrap(), mode);
    }
    let _ = s.parse::<Stage1Method>();
    let _ = s.parse::<PromptMode>();
    let _ = s.parse::<EmbedderSection>();
    let doc = tokenize(s);
    assert_eq!(doc.types.len(), doc.weights.len());
    for sentence in split_sentences(s) {
        assert!(!sentence.trim().is_empty());
    }
}
