//! Dialog datasets: the JSON Lines layout the engine reads, statistics and
//! their comparison against published counts, a converter from the public
//! FoCus JSON release, and a seeded synthetic fixture with planted ground
//! knowledge and personas.
//!
//! A dataset directory holds `corpus.jsonl` plus either `dialogs.jsonl`
//! (split `all`) or one `dialogs.<split>.jsonl` per split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::personalize;
use crate::model::{tokens, DialogHistory, Passage, PersonaSet, Utterance};
use crate::retrieval::{build_corpus, corpus_to_jsonl, parse_corpus_jsonl, Corpus};

pub const DEFAULT_SPLIT: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub split: String,
    pub personas: PersonaSet,
    pub history: DialogHistory,
    /// Passage ids available to this dialog; empty means the whole corpus.
    pub corpus_refs: Vec<String>,
}

impl Dialog {
    pub fn topic(&self) -> &str {
        &self.history.topic
    }

    /// History truncated to the first `turn + 1` utterances.
    pub fn prefix(&self, turn: usize) -> DialogHistory {
        DialogHistory::new(self.history.topic.clone(), self.history.utterances[..=turn].to_vec())
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    q: String,
    r: String,
    #[serde(default)]
    gp: Vec<usize>,
    #[serde(default)]
    gk: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    topic: String,
    personas: Vec<String>,
    utterances: Vec<UtteranceLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    corpus_refs: Vec<String>,
}

fn integrity(dialog: &str, reason: impl Into<String>) -> Error {
    Error::Integrity {
        dialog: dialog.to_string(),
        reason: reason.into(),
    }
}

/// Parses one dialogs file. Dialogs without an `id` get `<split>:<n>`,
/// `n` counting non-blank lines from 0. Persona indices are checked here;
/// passage references are checked by [`check_integrity`].
pub fn parse_dialogs_jsonl(text: &str, source_name: &str, split: &str) -> Result<Vec<Dialog>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: DialogLine = serde_json::from_str(line).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        let id = d.id.unwrap_or_else(|| format!("{split}:{}", out.len()));
        if !seen.insert(id.clone()) {
            return Err(integrity(&id, "duplicate dialog id"));
        }
        let personas = PersonaSet::new(d.personas).map_err(|e| integrity(&id, e.to_string()))?;
        if d.utterances.is_empty() {
            return Err(integrity(&id, "dialog has no utterances"));
        }
        let mut utterances = Vec::with_capacity(d.utterances.len());
        for (t, u) in d.utterances.into_iter().enumerate() {
            let u = Utterance::new(u.q, u.r, u.gp, u.gk).map_err(|e| integrity(&id, format!("turn {t}: {e}")))?;
            u.check_personas(personas.len())
                .map_err(|e| integrity(&id, format!("turn {t}: {e}")))?;
            utterances.push(u);
        }
        out.push(Dialog {
            id,
            split: split.to_string(),
            personas,
            history: DialogHistory::new(d.topic, utterances),
            corpus_refs: d.corpus_refs,
        });
    }
    Ok(out)
}

/// Serializes dialogs in the line format read by [`parse_dialogs_jsonl`].
pub fn dialogs_to_jsonl(dialogs: &[Dialog]) -> String {
    let mut out = String::new();
    for d in dialogs {
        let line = DialogLine {
            id: Some(d.id.clone()),
            topic: d.history.topic.clone(),
            personas: d.personas.as_slice().to_vec(),
            utterances: d
                .history
                .utterances
                .iter()
                .map(|u| UtteranceLine {
                    q: u.question.clone(),
                    r: u.response.clone(),
                    gp: u.ground_persona_indices.clone(),
                    gk: u.ground_knowledge_id.clone(),
                })
                .collect(),
            corpus_refs: d.corpus_refs.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dialog serializes"));
        out.push('\n');
    }
    out
}

/// Every ground knowledge id and corpus reference must resolve.
pub fn check_integrity(dialogs: &[Dialog], corpus: &Corpus) -> Result<()> {
    for d in dialogs {
        for r in &d.corpus_refs {
            if corpus.get(r).is_none() {
                return Err(integrity(&d.id, format!("corpus reference `{r}` not in corpus")));
            }
        }
        for (t, u) in d.history.utterances.iter().enumerate() {
            if let Some(gk) = &u.ground_knowledge_id {
                if corpus.get(gk).is_none() {
                    return Err(integrity(
                        &d.id,
                        format!("turn {t}: ground knowledge `{gk}` not in corpus"),
                    ));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub dialogs: usize,
    pub utterances: usize,
    /// Utterances with no ground persona.
    pub knowledge_only: usize,
    /// Utterances grounded on at least one persona.
    pub persona_knowledge: usize,
    /// Distinct dialog topics.
    pub landmarks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: BTreeMap<String, SplitStats>,
    /// Landmarks here count distinct topics over all splits.
    pub total: SplitStats,
}

fn split_stats<'a>(dialogs: impl Iterator<Item = &'a Dialog>) -> SplitStats {
    let mut s = SplitStats::default();
    let mut topics = BTreeSet::new();
    for d in dialogs {
        s.dialogs += 1;
        topics.insert(d.topic());
        for u in &d.history.utterances {
            s.utterances += 1;
            if u.ground_persona_indices.is_empty() {
                s.knowledge_only += 1;
            } else {
                s.persona_knowledge += 1;
            }
        }
    }
    s.landmarks = topics.len();
    s
}

impl DatasetStats {
    pub fn compute(dialogs: &[Dialog]) -> Self {
        let names: BTreeSet<&str> = dialogs.iter().map(|d| d.split.as_str()).collect();
        let splits = names
            .into_iter()
            .map(|n| (n.to_string(), split_stats(dialogs.iter().filter(|d| d.split == n))))
            .collect();
        Self {
            splits,
            total: split_stats(dialogs.iter()),
        }
    }
}

/// Expected counts; `None` fields are not compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSplit {
    pub dialogs: Option<usize>,
    pub utterances: Option<usize>,
    pub knowledge_only: Option<usize>,
    pub persona_knowledge: Option<usize>,
    pub landmarks: Option<usize>,
}

impl From<SplitStats> for ExpectedSplit {
    fn from(s: SplitStats) -> Self {
        Self {
            dialogs: Some(s.dialogs),
            utterances: Some(s.utterances),
            knowledge_only: Some(s.knowledge_only),
            persona_knowledge: Some(s.persona_knowledge),
            landmarks: Some(s.landmarks),
        }
    }
}

/// Published FoCus statistics per split.
pub fn focus_published_stats() -> BTreeMap<String, ExpectedSplit> {
    let split = |d, u, ko, pk, l| ExpectedSplit {
        dialogs: Some(d),
        utterances: Some(u),
        knowledge_only: Some(ko),
        persona_knowledge: Some(pk),
        landmarks: Some(l),
    };
    BTreeMap::from([
        ("train".to_string(), split(10_284, 57_928, 36_472, 21_456, 4_918)),
        ("valid".to_string(), split(1_600, 9_008, 5_664, 3_344, 1_414)),
        ("test".to_string(), split(1_600, 9_035, 5_707, 3_328, 1_383)),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsMismatch {
    /// `<split>.<field>`.
    pub field: String,
    pub expected: usize,
    pub actual: usize,
}

/// Field-by-field comparison. Mismatches are logged at warn level and
/// returned; a missing split counts as all zeros.
pub fn validate_stats(stats: &DatasetStats, expected: &BTreeMap<String, ExpectedSplit>) -> Vec<StatsMismatch> {
    let mut out = Vec::new();
    for (name, exp) in expected {
        let act = stats.splits.get(name).copied().unwrap_or_default();
        let fields = [
            ("dialogs", exp.dialogs, act.dialogs),
            ("utterances", exp.utterances, act.utterances),
            ("knowledge_only", exp.knowledge_only, act.knowledge_only),
            ("persona_knowledge", exp.persona_knowledge, act.persona_knowledge),
            ("landmarks", exp.landmarks, act.landmarks),
        ];
        for (field, e, a) in fields {
            if let Some(e) = e {
                if e != a {
                    log::warn!("dataset statistic {name}.{field}: expected {e}, found {a}");
                    out.push(StatsMismatch {
                        field: format!("{name}.{field}"),
                        expected: e,
                        actual: a,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dialogs: Vec<Dialog>,
    pub corpus: Corpus,
    pub stats: DatasetStats,
}

impl Dataset {
    /// Validates and indexes in-memory dialogs and passages.
    pub fn new(dialogs: Vec<Dialog>, passages: Vec<Passage>) -> Result<Self> {
        let corpus = build_corpus(passages)?;
        check_integrity(&dialogs, &corpus)?;
        let stats = DatasetStats::compute(&dialogs);
        Ok(Self { dialogs, corpus, stats })
    }

    pub fn dialog(&self, id: &str) -> Option<&Dialog> {
        self.dialogs.iter().find(|d| d.id == id)
    }

    pub fn split(&self, name: &str) -> impl Iterator<Item = &Dialog> + '_ {
        let name = name.to_string();
        self.dialogs.iter().filter(move |d| d.split == name)
    }
}

/// Canonical split name for a file stem suffix.
pub fn canonical_split(name: &str) -> String {
    match name.to_ascii_lowercase().as_str() {
        "val" | "dev" | "validation" | "valid" => "valid".into(),
        other => other.to_string(),
    }
}

fn split_rank(name: &str) -> (usize, String) {
    let r = match name {
        "train" => 0,
        "valid" => 1,
        "test" => 2,
        _ => 3,
    };
    (r, name.to_string())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory (see the module docs for the layout).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let corpus_path = dir.join("corpus.jsonl");
    let passages = parse_corpus_jsonl(&read(&corpus_path)?, &corpus_path.display().to_string())?;
    let mut files: Vec<(String, std::path::PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name == "dialogs.jsonl" {
            files.push((DEFAULT_SPLIT.to_string(), path.clone()));
        } else if let Some(split) = name.strip_prefix("dialogs.").and_then(|s| s.strip_suffix(".jsonl")) {
            files.push((canonical_split(split), path.clone()));
        }
    }
    if files.is_empty() {
        return Err(Error::Invalid(format!("{}: no dialogs*.jsonl files", dir.display())));
    }
    files.sort_by_key(|(s, _)| split_rank(s));
    let mut dialogs = Vec::new();
    let mut ids = HashSet::new();
    for (split, path) in files {
        for d in parse_dialogs_jsonl(&read(&path)?, &path.display().to_string(), &split)? {
            if !ids.insert(d.id.clone()) {
                return Err(integrity(&d.id, "duplicate dialog id across splits"));
            }
            dialogs.push(d);
        }
    }
    Dataset::new(dialogs, passages)
}

/// Writes `corpus.jsonl` and the dialogs files. Split `all` goes to
/// `dialogs.jsonl`, any other split to `dialogs.<split>.jsonl`.
pub fn write_dataset(dir: impl AsRef<Path>, dialogs: &[Dialog], passages: &[Passage]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("corpus.jsonl".into(), corpus_to_jsonl(passages))?;
    let mut by_split: BTreeMap<&str, Vec<Dialog>> = BTreeMap::new();
    for d in dialogs {
        by_split.entry(&d.split).or_default().push(d.clone());
    }
    for (split, ds) in by_split {
        let name = if split == DEFAULT_SPLIT {
            "dialogs.jsonl".to_string()
        } else {
            format!("dialogs.{split}.jsonl")
        };
        write(name, dialogs_to_jsonl(&ds))?;
    }
    Ok(())
}

fn str_field<'a>(v: &'a serde_json::Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(|x| x.as_str())
}

/// Converts the public FoCus JSON release (`{"data": [...]}`) for one split.
///
/// Each dialog's `knowledge` paragraphs become passages `<dialogID>-k<j>`.
/// Every entry of `utterance` holds the running conversation under a
/// `dialogue<N>` key whose last two strings are the current question and
/// answer; `persona_grounding` booleans become ground persona indices and
/// `knowledge_candidates[knowledge_answer_index]` the ground knowledge,
/// matched to a paragraph by exact text or added as `<dialogID>-u<t>`.
pub fn convert_focus_json(text: &str, split: &str) -> Result<(Vec<Dialog>, Vec<Passage>)> {
    let src = format!("focus:{split}");
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::parse(&src, e.line(), e.to_string()))?;
    let data = root
        .get("data")
        .and_then(|d| d.as_array())
        .or_else(|| root.as_array())
        .ok_or_else(|| Error::parse(&src, 1, "expected a `data` array"))?;
    let mut dialogs = Vec::new();
    let mut passages = Vec::new();
    for (n, item) in data.iter().enumerate() {
        let id = item
            .get("dialogID")
            .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
            .unwrap_or_else(|| format!("{split}:{n}"));
        let link = str_field(item, "landmark_link").unwrap_or("");
        let topic = link
            .rsplit('/')
            .next()
            .filter(|s| !s.is_empty())
            .map(|s| s.replace('_', " "))
            .unwrap_or_else(|| id.clone());
        let personas: Vec<String> = item
            .get("persona")
            .and_then(|p| p.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|x| x.as_str())
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        let personas = PersonaSet::new(personas).map_err(|e| integrity(&id, e.to_string()))?;

        let mut by_body: HashMap<String, String> = HashMap::new();
        let mut refs = Vec::new();
        if let Some(k) = item.get("knowledge").and_then(|k| k.as_array()) {
            for (j, para) in k.iter().filter_map(|x| x.as_str()).enumerate() {
                if para.trim().is_empty() || by_body.contains_key(para) {
                    continue;
                }
                let pid = format!("{id}-k{j}");
                passages.push(Passage::new(pid.clone(), topic.clone(), para)?);
                by_body.insert(para.to_string(), pid.clone());
                refs.push(pid);
            }
        }

        let turns = item
            .get("utterance")
            .and_then(|u| u.as_array())
            .ok_or_else(|| integrity(&id, "missing `utterance` array"))?;
        let mut utterances = Vec::new();
        for (t, turn) in turns.iter().enumerate() {
            let obj = turn
                .as_object()
                .ok_or_else(|| integrity(&id, format!("turn {t} is not an object")))?;
            let convo = obj
                .iter()
                .find(|(k, _)| k.starts_with("dialogue"))
                .and_then(|(_, v)| v.as_array())
                .ok_or_else(|| integrity(&id, format!("turn {t} has no dialogue array")))?;
            let lines: Vec<&str> = convo.iter().filter_map(|x| x.as_str()).collect();
            if lines.len() < 2 {
                return Err(integrity(&id, format!("turn {t} dialogue has fewer than two lines")));
            }
            let (q, r) = (lines[lines.len() - 2], lines[lines.len() - 1]);
            let gp: Vec<usize> = turn
                .get("persona_grounding")
                .and_then(|g| g.as_array())
                .map(|a| {
                    a.iter()
                        .enumerate()
                        .filter(|(_, b)| b.as_bool() == Some(true))
                        .map(|(i, _)| i)
                        .collect()
                })
                .unwrap_or_default();
            let gk_text = turn
                .get("knowledge_answer_index")
                .and_then(|i| i.as_u64())
                .and_then(|i| turn.get("knowledge_candidates")?.as_array()?.get(i as usize)?.as_str());
            let gk = match gk_text {
                Some(text) if !text.trim().is_empty() => Some(match by_body.get(text) {
                    Some(pid) => pid.clone(),
                    None => {
                        let pid = format!("{id}-u{t}");
                        passages.push(Passage::new(pid.clone(), topic.clone(), text)?);
                        by_body.insert(text.to_string(), pid.clone());
                        refs.push(pid.clone());
                        pid
                    }
                }),
                _ => None,
            };
            let u = Utterance::new(q, r, gp, gk).map_err(|e| integrity(&id, format!("turn {t}: {e}")))?;
            u.check_personas(personas.len())
                .map_err(|e| integrity(&id, format!("turn {t}: {e}")))?;
            utterances.push(u);
        }
        if utterances.is_empty() {
            return Err(integrity(&id, "dialog has no utterances"));
        }
        dialogs.push(Dialog {
            id,
            split: canonical_split(split),
            personas,
            history: DialogHistory::new(topic, utterances),
            corpus_refs: refs,
        });
    }
    Ok((dialogs, passages))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFixture {
    pub dialogs: Vec<Dialog>,
    pub passages: Vec<Passage>,
}

impl SynthFixture {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.dialogs, self.passages)
    }
}

const SYLLABLE_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const PERSONA_FRAMES: &[&str] = &[
    "I like {}",
    "I have been to {}",
    "I am a {} fan",
    "My favorite food is {}",
    "I collect {}",
];
const DISTINCT_PER_PASSAGE: usize = 4;
const QUESTION_TOKENS: usize = 3;

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self) -> String {
        loop {
            let w: String = (0..3)
                .map(|_| {
                    let c = SYLLABLE_ONSETS[self.rng.random_range(0..SYLLABLE_ONSETS.len())];
                    let v = SYLLABLE_VOWELS[self.rng.random_range(0..SYLLABLE_VOWELS.len())];
                    format!("{c}{v}")
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic synthetic dataset.
///
/// Every passage is a single sentence holding four words that occur nowhere
/// else in the corpus; every question uses three of them, so exactly one
/// passage shares content tokens with it. Each response is the planted
/// passage sentence followed by the persona clause for the turn's ground
/// personas, which is what the template generator produces when given the
/// ground knowledge and ground personas.
pub fn synth_fixture(seed: u64, n_dialogs: usize, n_personas: usize, n_passages: usize) -> Result<SynthFixture> {
    if n_dialogs == 0 || n_passages == 0 {
        return Err(Error::range(
            "fixture size",
            "dialog and passage counts must be at least 1",
        ));
    }
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: HashSet::new(),
    };
    let landmarks: Vec<String> = (0..n_dialogs).map(|_| capitalize(&words.fresh())).collect();

    let mut passages = Vec::with_capacity(n_passages);
    let mut distinct: Vec<Vec<String>> = Vec::with_capacity(n_passages);
    for j in 0..n_passages {
        let landmark = &landmarks[j % n_dialogs];
        let d: Vec<String> = (0..DISTINCT_PER_PASSAGE).map(|_| words.fresh()).collect();
        let body = format!("{landmark} has {}.", d.join(" "));
        passages.push(Passage::new(format!("p{j:05}"), landmark.clone(), body)?);
        distinct.push(d);
    }
    // Planted tokens must be unique to their passage.
    let mut owners: HashMap<String, usize> = HashMap::new();
    for (j, p) in passages.iter().enumerate() {
        for t in tokens(&p.body) {
            owners
                .entry(t)
                .and_modify(|o| {
                    if *o != j {
                        *o = usize::MAX
                    }
                })
                .or_insert(j);
        }
    }
    for (j, d) in distinct.iter().enumerate() {
        if d.iter().any(|t| owners.get(t) != Some(&j)) {
            return Err(Error::Invalid(format!(
                "fixture passage {j} has an ambiguous planted token"
            )));
        }
    }

    let mut dialogs = Vec::with_capacity(n_dialogs);
    for (d, landmark) in landmarks.iter().enumerate() {
        let personas: Vec<String> = (0..n_personas)
            .map(|i| PERSONA_FRAMES[i % PERSONA_FRAMES.len()].replace("{}", &capitalize(&words.fresh())))
            .collect();
        let own: Vec<usize> = (d..n_passages).step_by(n_dialogs).collect();
        let n_turns = words.rng.random_range(3..=6);
        let mut utterances = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let j = if own.is_empty() {
                words.rng.random_range(0..n_passages)
            } else {
                own[words.rng.random_range(0..own.len())]
            };
            let mut picked = distinct[j].clone();
            picked.shuffle(&mut words.rng);
            picked.truncate(QUESTION_TOKENS);
            let question = format!("What about the {}?", picked.join(" "));
            let mut gp: Vec<usize> = Vec::new();
            if n_personas > 0 {
                let k = words.rng.random_range(0..=n_personas.min(2));
                let mut all: Vec<usize> = (0..n_personas).collect();
                all.shuffle(&mut words.rng);
                gp = all[..k].to_vec();
            }
            let texts: Vec<&str> = gp.iter().map(|&i| personas[i].as_str()).collect();
            let response = personalize(&passages[j].body, &texts);
            utterances.push(Utterance::new(question, response, gp, Some(passages[j].id.clone()))?);
        }
        dialogs.push(Dialog {
            id: format!("synth-{d:04}"),
            split: DEFAULT_SPLIT.to_string(),
            personas: PersonaSet::new(personas)?,
            history: DialogHistory::new(landmark.clone(), utterances),
            corpus_refs: own.iter().map(|&j| passages[j].id.clone()).collect(),
        });
    }
    Ok(SynthFixture { dialogs, passages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::tfidf_retrieve;

    const TWO: &str = r#"{"topic":"Mount A","personas":["I hike","I swim"],"utterances":[{"q":"Where?","r":"There.","gp":[0],"gk":"p1"},{"q":"When?","r":"Now.","gp":[],"gk":null}]}
{"id":"x","topic":"Lake B","personas":[],"utterances":[{"q":"Deep?","r":"Yes.","gp":[],"gk":"p2"}]}
"#;

    fn corpus() -> Vec<Passage> {
        vec![
            Passage::new("p1", "Mount A", "Mount A is high.").unwrap(),
            Passage::new("p2", "Lake B", "Lake B is deep.").unwrap(),
        ]
    }

    #[test]
    fn two_dialog_stats() {
        let dialogs = parse_dialogs_jsonl(TWO, "t", "all").unwrap();
        assert_eq!(dialogs[0].id, "all:0");
        assert_eq!(dialogs[1].id, "x");
        let ds = Dataset::new(dialogs, corpus()).unwrap();
        let s = ds.stats.splits["all"];
        assert_eq!(
            s,
            SplitStats {
                dialogs: 2,
                utterances: 3,
                knowledge_only: 2,
                persona_knowledge: 1,
                landmarks: 2
            }
        );
        assert_eq!(ds.stats.total, s);
    }

    #[test]
    fn bad_persona_index_names_dialog() {
        let text = r#"{"id":"d7","topic":"t","personas":["a"],"utterances":[{"q":"q","r":"r","gp":[3]}]}"#;
        match parse_dialogs_jsonl(text, "t", "all") {
            Err(Error::Integrity { dialog, .. }) => assert_eq!(dialog, "d7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_knowledge_rejected() {
        let text = r#"{"id":"d","topic":"t","personas":[],"utterances":[{"q":"q","r":"r","gk":"nope"}]}"#;
        let dialogs = parse_dialogs_jsonl(text, "t", "all").unwrap();
        assert!(matches!(Dataset::new(dialogs, corpus()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn parse_error_has_line() {
        match parse_dialogs_jsonl("\n{bad", "f", "all") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stats_validation() {
        let mut stats = DatasetStats::default();
        let s = SplitStats {
            dialogs: 3,
            utterances: 9,
            knowledge_only: 5,
            persona_knowledge: 4,
            landmarks: 2,
        };
        stats.splits.insert("valid".into(), s);
        let exp = BTreeMap::from([("valid".to_string(), ExpectedSplit::from(s))]);
        assert!(validate_stats(&stats, &exp).is_empty());
        let mut off = exp.clone();
        off.get_mut("valid").unwrap().utterances = Some(10);
        let m = validate_stats(&stats, &off);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].field, "valid.utterances");
    }

    #[test]
    fn published_counts_are_consistent() {
        for s in focus_published_stats().values() {
            assert_eq!(
                s.knowledge_only.unwrap() + s.persona_knowledge.unwrap(),
                s.utterances.unwrap()
            );
        }
        let p = focus_published_stats();
        assert_eq!(p["valid"].landmarks, Some(1_414));
        assert_eq!(p["test"].landmarks, Some(1_383));
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_fixture(7, 5, 3, 12).unwrap();
        let b = synth_fixture(7, 5, 3, 12).unwrap();
        assert_eq!(dialogs_to_jsonl(&a.dialogs), dialogs_to_jsonl(&b.dialogs));
        assert_eq!(corpus_to_jsonl(&a.passages), corpus_to_jsonl(&b.passages));
        assert_ne!(
            dialogs_to_jsonl(&a.dialogs),
            dialogs_to_jsonl(&synth_fixture(8, 5, 3, 12).unwrap().dialogs)
        );
    }

    #[test]
    fn synth_without_personas_is_generic() {
        let f = synth_fixture(1, 4, 0, 6).unwrap();
        assert!(f
            .dialogs
            .iter()
            .flat_map(|d| &d.history.utterances)
            .all(|u| u.ground_persona_indices.is_empty()));
    }

    #[test]
    fn synth_planted_knowledge_is_top_tfidf() {
        let ds = synth_fixture(3, 10, 2, 25).unwrap().into_dataset().unwrap();
        for d in &ds.dialogs {
            for u in &d.history.utterances {
                let top = tfidf_retrieve(&ds.corpus, &u.question, 1).unwrap();
                assert_eq!(top.entries[0].id, *u.ground_knowledge_id.as_ref().unwrap());
            }
        }
    }

    #[test]
    fn focus_conversion() {
        let json = r#"{"data":[{"dialogID":"abc","landmark_link":"https://en.wikipedia.org/wiki/Mount_Fuji",
            "persona":["I like snow.","I am from Peru."],
            "knowledge":["Fuji is tall.","Fuji is in Japan."],
            "utterance":[
              {"dialogue1":["How tall?","Very tall."],"persona_grounding1":[false,false],
               "persona_grounding":[false,true],"knowledge_candidates":["x","Fuji is tall."],"knowledge_answer_index":1},
              {"dialogue2":["How tall?","Very tall.","Where?","Japan."],"persona_grounding":[false,false],
               "knowledge_candidates":["Snowy peak."],"knowledge_answer_index":0}
            ]}]}"#;
        let (dialogs, passages) = convert_focus_json(json, "val").unwrap();
        let d = &dialogs[0];
        assert_eq!(d.split, "valid");
        assert_eq!(d.topic(), "Mount Fuji");
        assert_eq!(d.history.utterances[0].ground_persona_indices, [1]);
        assert_eq!(d.history.utterances[0].ground_knowledge_id.as_deref(), Some("abc-k0"));
        assert_eq!(d.history.utterances[1].question, "Where?");
        assert_eq!(d.history.utterances[1].ground_knowledge_id.as_deref(), Some("abc-u1"));
        assert_eq!(passages.len(), 3);
        assert!(Dataset::new(dialogs, passages).is_ok());
    }
}
