mod common;

use kperm_core::dataset::{
    convert_focus_json, load_dataset, synth_fixture, write_dataset, Dataset, Dialog, DEFAULT_SPLIT,
};
use kperm_core::error::Error;
use kperm_core::model::{DialogHistory, Passage, PersonaSet, Utterance};

fn passages() -> Vec<Passage> {
    vec![
        Passage::new("k1", "Lake", "The lake is deep.").unwrap(),
        Passage::new("k2", "Tower", "The tower is old.").unwrap(),
    ]
}

fn dialog(id: &str, split: &str, gk: &str) -> Dialog {
    Dialog {
        id: id.into(),
        split: split.into(),
        personas: PersonaSet::new(vec!["I like lakes.".into()]).unwrap(),
        history: DialogHistory::new(
            "Lake",
            vec![Utterance::new("How deep?", "Very deep.", vec![0], Some(gk.into())).unwrap()],
        ),
        corpus_refs: vec![],
    }
}

#[test]
fn split_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dialogs = vec![
        dialog("a", "train", "k1"),
        dialog("b", "valid", "k2"),
        dialog("c", "test", "k1"),
    ];
    write_dataset(dir.path(), &dialogs, &passages()).unwrap();
    for f in [
        "corpus.jsonl",
        "dialogs.train.jsonl",
        "dialogs.valid.jsonl",
        "dialogs.test.jsonl",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.dialogs, dialogs);
    assert_eq!(ds.corpus.passages(), passages().as_slice());
    assert_eq!(ds.stats.splits["valid"].dialogs, 1);
    assert_eq!(ds.stats.total.utterances, 3);
}

#[test]
fn split_aliases_are_canonical() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &[dialog("a", "train", "k1")], &passages()).unwrap();
    std::fs::rename(
        dir.path().join("dialogs.train.jsonl"),
        dir.path().join("dialogs.dev.jsonl"),
    )
    .unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.dialogs[0].split, "valid");
}

#[test]
fn synthetic_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let fx = synth_fixture(3, 8, 4, 24).unwrap();
    write_dataset(dir.path(), &fx.dialogs, &fx.passages).unwrap();
    assert!(dir.path().join("dialogs.jsonl").exists());
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.dialogs.iter().all(|d| d.split == DEFAULT_SPLIT));
    assert_eq!(ds.dialogs, fx.dialogs);
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &ds.dialogs, ds.corpus.passages()).unwrap();
    for f in ["corpus.jsonl", "dialogs.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn missing_ids_default_to_split_and_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("corpus.jsonl"),
        "{\"id\":\"k1\",\"topic\":\"Lake\",\"body\":\"The lake.\"}\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("dialogs.test.jsonl"),
        "{\"topic\":\"Lake\",\"personas\":[],\"utterances\":[{\"q\":\"Where?\",\"r\":\"Here.\",\"gk\":\"k1\"}]}\n\n\
         {\"topic\":\"Lake\",\"personas\":[],\"utterances\":[{\"q\":\"When?\",\"r\":\"Now.\"}]}\n",
    )
    .unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let ids: Vec<&str> = ds.dialogs.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["test:0", "test:1"]);
}

#[test]
fn dangling_knowledge_is_an_integrity_error() {
    let err = Dataset::new(vec![dialog("x", "all", "nope")], passages()).unwrap_err();
    assert!(
        matches!(&err, Error::Integrity { dialog, .. } if dialog == "x"),
        "{err}"
    );
}

#[test]
fn duplicate_ids_across_splits_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(
        dir.path(),
        &[dialog("a", "train", "k1"), dialog("a", "test", "k1")],
        &passages(),
    )
    .unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity { .. })));
}

#[test]
fn missing_directory_contents_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Invalid(_))));
}

#[test]
fn converted_focus_data_loads() {
    let json = r#"{"data": [{
        "dialogID": "d1",
        "landmark_link": "https://en.wikipedia.org/wiki/Mount_Monadnock",
        "persona": ["I like hiking.", "I live in Boston."],
        "knowledge": ["Mount Monadnock is a mountain.", "It is 3165 feet tall."],
        "utterance": [
            {"dialogue1": ["Where is it?", "It is in New Hampshire."],
             "persona_grounding": [false, true],
             "knowledge_candidates": ["x", "Mount Monadnock is a mountain."],
             "knowledge_answer_index": 1},
            {"dialogue2": ["Where is it?", "It is in New Hampshire.", "How tall?", "About 3165 feet."],
             "persona_grounding": [true, false],
             "knowledge_candidates": ["The summit is bare.", "y"],
             "knowledge_answer_index": 0}
        ]}]}"#;
    let (dialogs, passages) = convert_focus_json(json, "val").unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &dialogs, &passages).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let d = &ds.dialogs[0];
    assert_eq!(d.split, "valid");
    assert_eq!(d.topic(), "Mount Monadnock");
    let u = &d.history.utterances;
    assert_eq!(
        (u[1].question.as_str(), u[1].response.as_str()),
        ("How tall?", "About 3165 feet.")
    );
    assert_eq!(u[0].ground_knowledge_id.as_deref(), Some("d1-k0"));
    assert_eq!(u[1].ground_knowledge_id.as_deref(), Some("d1-u1"));
    assert_eq!(u[0].ground_persona_indices, [1]);
    assert_eq!(ds.corpus.get("d1-u1").unwrap().body, "The summit is bare.");
}

#[test]
fn planted_fixture_matches_shared_helper() {
    let ds = common::planted(5);
    assert_eq!(ds.dialogs.len(), 5);
    assert_eq!(ds.corpus.len(), 15);
}
