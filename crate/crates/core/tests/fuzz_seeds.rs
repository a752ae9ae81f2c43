//! Replays the checked-in fuzz corpus through the fuzz checks, so a seed that
//! crashes a target also fails the ordinary test run.

#[path = "../../../fuzz/src/lib.rs"]
mod checks;

use std::path::Path;

const TARGETS: &[(&str, fn(&[u8]))] = &[
    ("embedding_store", checks::embedding_store),
    ("corpus_jsonl", checks::corpus_jsonl),
    ("dialogs_jsonl", checks::dialogs_jsonl),
    ("dense_index", checks::dense_index),
    ("index_bundle", checks::index_bundle),
    ("pipeline_config", checks::pipeline_config),
    ("chat_response", checks::chat_response),
    ("focus_json", checks::focus_json),
    ("specs", checks::specs),
];

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            (path.display().to_string(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_target_has_seeds_and_survives_them() {
    for (target, check) in TARGETS {
        let seeds = seeds(target);
        assert!(!seeds.is_empty(), "{target} has no seeds");
        for (_, bytes) in seeds {
            check(&bytes);
            // Truncations are cheap extra coverage for the binary decoders.
            for cut in [0, 1, bytes.len() / 2, bytes.len().saturating_sub(1)] {
                check(&bytes[..cut.min(bytes.len())]);
            }
        }
    }
}

#[test]
fn generated_seeds_are_accepted() {
    use kperm_core::pipeline::{IndexBundle, PipelineConfig};
    use kperm_core::retrieval::{parse_corpus_jsonl, DenseIndex};
    for (name, bytes) in seeds("dense_index") {
        assert!(DenseIndex::from_bytes(&bytes).is_ok(), "{name}");
    }
    for (name, bytes) in seeds("index_bundle") {
        assert!(IndexBundle::from_bytes(&bytes).is_ok(), "{name}");
    }
    let text = |t: &str, n: &str| {
        let path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fuzz/corpus")
            .join(t)
            .join(n);
        std::fs::read_to_string(path).unwrap()
    };
    assert!(PipelineConfig::from_toml_str(&text("pipeline_config", "default")).is_ok());
    assert!(PipelineConfig::from_toml_str(&text("pipeline_config", "partial")).is_ok());
    assert!(parse_corpus_jsonl(&text("corpus_jsonl", "synth"), "seed").is_ok());
}
