//! End-to-end turn execution: rewrite, retrieve and rerank, select
//! personas, generate candidates and pick the highest-reward one.

mod bundle;
mod config;
mod harness;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bundle::{IndexBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use config::{
    EmbedderKind, EmbedderSection, GeneratorSection, HarnessSection, InferenceReference, PathsSection, PipelineConfig,
    RetrievalSection, RewardSection,
};
pub use harness::{
    augment, bench_retrievers, evaluate, turn_refs, AugmentReport, AugmentRow, EvalOutcome, GridRow, ModeReport,
    RetrieverGrid, GRID_SCHEMA_VERSION,
};

use crate::embeddings::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::generation::{generate_candidates, tagged_input, GenerationInput, TemplateGenerator};
use crate::metrics::MetricRow;
use crate::model::{
    DialogHistory, Passage, PersonaSelection, PersonaSet, RetrievedKnowledge, RewardBreakdown, ScoredPassage,
};
use crate::persona_select::{score_personas, select, EmbeddingPersonaScorer};
use crate::retrieval::{
    build_corpus, history_query, retrieve_rank, rewrite_query, Corpus, DenseIndex, EmbeddingScorer, IdentityRewriter,
    LshIndex, PassageScorer, QueryRewriter, Retriever, RewrittenQuery, Stage1Method, Stage1Scorer, TopicAppendRewriter,
};
use crate::reward::{rerank_candidates, PersonaAgreement};

/// Where a turn's knowledge comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Retrieve,
    /// Bypass retrieval with this passage.
    Ground(String),
}

/// Which personas condition the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaSource {
    Select,
    Ground(Vec<usize>),
    All,
    None,
}

/// One turn to run. Only the question of the last utterance of `history`
/// is read; its response and grounding fields are ignored.
#[derive(Debug, Clone)]
pub struct TurnRequest<'a> {
    pub history: &'a DialogHistory,
    pub personas: &'a PersonaSet,
    pub knowledge: KnowledgeSource,
    pub persona: PersonaSource,
    /// Reranking reference; `None` uses the inference-time proxy.
    pub reference: Option<&'a str>,
    /// Persona ground truth for the reward's agreement term; `None` scores
    /// the personas used against themselves.
    pub persona_truth: Option<&'a [usize]>,
}

impl<'a> TurnRequest<'a> {
    /// Plain inference: retrieve, select, rerank against the proxy.
    pub fn inference(history: &'a DialogHistory, personas: &'a PersonaSet) -> Self {
        Self {
            history,
            personas,
            knowledge: KnowledgeSource::Retrieve,
            persona: PersonaSource::Select,
            reference: None,
            persona_truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub query: String,
    pub rewritten_query: RewrittenQuery,
    pub knowledge_source: KnowledgeSource,
    pub retrieved: Vec<ScoredPassage>,
    pub persona_source: PersonaSource,
    /// One score per persona plus the no-persona score; empty when the
    /// selector did not run.
    pub persona_scores: Vec<f64>,
    pub selected_personas: Vec<usize>,
    pub generator_input: String,
    pub candidates: Vec<String>,
    pub rewards: Vec<RewardBreakdown>,
    pub chosen: usize,
    pub response: String,
    pub reference: String,
    pub metrics: Option<MetricRow>,
}

/// Ablation for evaluation: ground or retrieved knowledge, and a persona
/// policy. Written `gp`, `sp`, `allp`, `nop`, optionally joined with `gk`
/// (`gk+gp`). `gk` alone uses no personas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalMode {
    pub ground_knowledge: bool,
    pub persona: PersonaMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaMode {
    All,
    Ground,
    Selected,
    None,
}

impl PersonaMode {
    fn code(self) -> &'static str {
        match self {
            PersonaMode::All => "allp",
            PersonaMode::Ground => "gp",
            PersonaMode::Selected => "sp",
            PersonaMode::None => "nop",
        }
    }
}

impl EvalMode {
    pub fn new(ground_knowledge: bool, persona: PersonaMode) -> Self {
        Self {
            ground_knowledge,
            persona,
        }
    }

    pub fn knowledge_source(&self, ground_id: Option<&str>) -> Result<KnowledgeSource> {
        if !self.ground_knowledge {
            return Ok(KnowledgeSource::Retrieve);
        }
        ground_id
            .map(|id| KnowledgeSource::Ground(id.to_string()))
            .ok_or_else(|| Error::Invalid("turn has no ground knowledge".into()))
    }

    pub fn persona_source(&self, ground: &[usize]) -> PersonaSource {
        match self.persona {
            PersonaMode::All => PersonaSource::All,
            PersonaMode::Ground => PersonaSource::Ground(ground.to_vec()),
            PersonaMode::Selected => PersonaSource::Select,
            PersonaMode::None => PersonaSource::None,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ground_knowledge {
            write!(f, "gk+{}", self.persona.code())
        } else {
            f.write_str(self.persona.code())
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut gk = false;
        let mut persona = None;
        for part in s.split('+').map(|p| p.trim().to_ascii_lowercase()) {
            let p = match part.as_str() {
                "gk" | "ground_knowledge" => {
                    if gk {
                        return Err(Error::Invalid(format!("mode `{s}` repeats gk")));
                    }
                    gk = true;
                    continue;
                }
                "gp" | "ground_persona" => PersonaMode::Ground,
                "sp" | "selected_persona" => PersonaMode::Selected,
                "allp" | "all_personas" => PersonaMode::All,
                "nop" | "no_persona" => PersonaMode::None,
                _ => return Err(Error::Invalid(format!("unknown evaluation mode `{part}`"))),
            };
            if persona.replace(p).is_some() {
                return Err(Error::Invalid(format!("mode `{s}` names two persona policies")));
            }
        }
        match (gk, persona) {
            (false, None) => Err(Error::Invalid("empty evaluation mode".into())),
            (gk, p) => Ok(EvalMode::new(gk, p.unwrap_or(PersonaMode::None))),
        }
    }
}

/// Loaded corpus, indexes and embedder, shared read-only by every turn.
pub struct Engine {
    cfg: PipelineConfig,
    provider: Arc<dyn EmbeddingProvider>,
    corpus: Corpus,
    dense: DenseIndex,
    lsh: Option<LshIndex>,
}

impl Engine {
    pub fn new(cfg: PipelineConfig, passages: Vec<Passage>) -> Result<Self> {
        cfg.validate()?;
        let provider = cfg.embedder.build()?;
        let corpus = build_corpus(passages)?;
        let dense = DenseIndex::build(&corpus, &*provider, cfg.seed)?;
        Self::assemble(cfg, provider, corpus, dense)
    }

    /// Uses a prebuilt bundle; the bundle's embedder replaces the
    /// configured one so queries and passages share a vector space.
    pub fn from_bundle(mut cfg: PipelineConfig, bundle: IndexBundle) -> Result<Self> {
        if cfg.embedder != bundle.embedder {
            log::info!("using the embedder recorded in the index bundle");
            cfg.embedder = bundle.embedder.clone();
        }
        cfg.validate()?;
        let provider = cfg.embedder.build()?;
        if provider.name() != bundle.dense.embedder() {
            return Err(Error::Config(format!(
                "index was built with `{}` but the embedder is `{}`",
                bundle.dense.embedder(),
                provider.name()
            )));
        }
        let corpus = build_corpus(bundle.passages)?;
        Self::assemble(cfg, provider, corpus, bundle.dense)
    }

    fn assemble(
        cfg: PipelineConfig,
        provider: Arc<dyn EmbeddingProvider>,
        corpus: Corpus,
        dense: DenseIndex,
    ) -> Result<Self> {
        let lsh = if cfg.retrieval.stage1 == Stage1Method::DenseLsh {
            Some(LshIndex::build(
                &dense,
                cfg.retrieval.lsh_tables,
                cfg.retrieval.lsh_bits,
                cfg.seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            provider,
            corpus,
            dense,
            lsh,
        })
    }

    /// Builds the LSH index if it is not there yet.
    pub fn ensure_lsh(&mut self) -> Result<()> {
        if self.lsh.is_none() {
            let r = &self.cfg.retrieval;
            self.lsh = Some(LshIndex::build(&self.dense, r.lsh_tables, r.lsh_bits, self.cfg.seed)?);
        }
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        &*self.provider
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn dense(&self) -> &DenseIndex {
        &self.dense
    }

    pub fn retriever(&self) -> Retriever<'_> {
        let mut r = Retriever::new(&self.corpus, &*self.provider).with_dense(&self.dense);
        r.bm25 = self.cfg.retrieval.bm25;
        if let Some(lsh) = &self.lsh {
            r = r.with_lsh(lsh);
        }
        r
    }

    fn passage_scorer(&self) -> Box<dyn PassageScorer + '_> {
        match self.cfg.retrieval.rerank.as_str() {
            "identity" => Box::new(Stage1Scorer),
            _ => Box::new(EmbeddingScorer::new(&*self.provider)),
        }
    }

    fn rewriter(&self) -> Box<dyn QueryRewriter> {
        match self.cfg.retrieval.rewriter.as_str() {
            "topic" => Box::new(TopicAppendRewriter),
            _ => Box::new(IdentityRewriter),
        }
    }

    fn passage(&self, id: &str) -> Result<&Passage> {
        self.corpus
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("passage `{id}` not in corpus")))
    }

    /// Runs one turn end to end. Errors carry the stage that raised them.
    pub fn run_turn(&self, req: &TurnRequest<'_>) -> Result<TurnTrace> {
        let history = inference_view(req.history)?;
        let query = history.last_question()?.to_string();
        let n = req.personas.len();

        let query_text = history_query(&history, self.cfg.retrieval.query_mode).map_err(|e| e.in_stage("rewrite"))?;
        let rewritten = rewrite_query(&query_text, &history.topic, &*self.rewriter());

        let knowledge = match &req.knowledge {
            KnowledgeSource::Retrieve => retrieve_rank(
                &self.retriever(),
                &rewritten.text,
                &self.cfg.retrieval.retrieve_rank(),
                &*self.passage_scorer(),
            )
            .map_err(|e| e.in_stage("retrieve"))?,
            KnowledgeSource::Ground(id) => {
                self.passage(id).map_err(|e| e.in_stage("retrieve"))?;
                RetrievedKnowledge::from_ranked(
                    vec![ScoredPassage {
                        id: id.clone(),
                        score: 1.0,
                    }],
                    1,
                )?
            }
        };
        let passages: Vec<&Passage> = knowledge
            .entries
            .iter()
            .map(|e| self.passage(&e.id))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("retrieve"))?;

        let (scores, selection) = match &req.persona {
            PersonaSource::Select => {
                let scorer = EmbeddingPersonaScorer::new(&*self.provider, self.cfg.selector.no_persona_baseline);
                let scores =
                    score_personas(&history, &passages, req.personas, &scorer).map_err(|e| e.in_stage("select"))?;
                let sel = select(&scores, n, &self.cfg.selector).map_err(|e| e.in_stage("select"))?;
                (scores, sel.selected_indices)
            }
            PersonaSource::Ground(gp) => (Vec::new(), gp.clone()),
            PersonaSource::All => (Vec::new(), (0..n).collect()),
            PersonaSource::None => (Vec::new(), Vec::new()),
        };
        let persona_texts: Vec<&str> = selection
            .iter()
            .map(|&i| {
                req.personas
                    .get(i)
                    .ok_or_else(|| Error::range("persona index", format!("{i} with {n} personas")).in_stage("select"))
            })
            .collect::<Result<_>>()?;

        let chosen_selection = PersonaSelection {
            selected_indices: selection.clone(),
            scores: scores.clone(),
        };
        let generator = TemplateGenerator::new(&*self.provider, self.cfg.generator.top_passages);
        let input = GenerationInput {
            query: &query,
            history: &history,
            knowledge: &passages,
            selection: &chosen_selection,
            personas: req.personas,
        };
        let candidates = generate_candidates(&generator, &input, self.cfg.generator.candidates)
            .map_err(|e| e.in_stage("generate"))?;

        let reference = match req.reference {
            Some(r) => r.to_string(),
            None => self.proxy_reference(&passages, &persona_texts),
        };
        let truth = req.persona_truth.map_or_else(|| selection.clone(), <[usize]>::to_vec);
        let agreement = PersonaAgreement::new(selection.clone(), truth, n);
        let reranked = rerank_candidates(
            &candidates,
            &reference,
            &*self.provider,
            &self.cfg.reward.weights(),
            &agreement,
            &self.cfg.reward.bleu,
        )
        .map_err(|e| e.in_stage("rerank"))?;

        Ok(TurnTrace {
            generator_input: tagged_input(&query, &history, &passages, &persona_texts),
            query,
            rewritten_query: rewritten,
            knowledge_source: req.knowledge.clone(),
            retrieved: knowledge.entries,
            persona_source: req.persona.clone(),
            persona_scores: scores,
            selected_personas: selection,
            response: candidates[reranked.best].clone(),
            candidates,
            rewards: reranked.rewards,
            chosen: reranked.best,
            reference,
            metrics: None,
        })
    }

    fn proxy_reference(&self, passages: &[&Passage], personas: &[&str]) -> String {
        let mut r = passages.first().map(|p| p.body.clone()).unwrap_or_default();
        if self.cfg.reward.inference_reference == InferenceReference::KnowledgePersona {
            for p in personas {
                r.push(' ');
                r.push_str(p);
            }
        }
        r
    }
}

/// Copy of `history` whose last utterance keeps only its question.
fn inference_view(history: &DialogHistory) -> Result<DialogHistory> {
    let mut h = history.clone();
    let last = h
        .utterances
        .last_mut()
        .ok_or_else(|| Error::Invalid("dialog history is empty".into()))?;
    last.response.clear();
    last.ground_persona_indices.clear();
    last.ground_knowledge_id = None;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_fixture;
    use crate::model::Utterance;

    #[test]
    fn eval_mode_parsing() {
        let m: EvalMode = "gk+gp".parse().unwrap();
        assert_eq!(m, EvalMode::new(true, PersonaMode::Ground));
        assert_eq!(m.to_string(), "gk+gp");
        assert_eq!(
            "sp".parse::<EvalMode>().unwrap(),
            EvalMode::new(false, PersonaMode::Selected)
        );
        assert_eq!(
            "gk".parse::<EvalMode>().unwrap(),
            EvalMode::new(true, PersonaMode::None)
        );
        assert_eq!("gp+gk".parse::<EvalMode>().unwrap().to_string(), "gk+gp");
        assert!("gp+sp".parse::<EvalMode>().is_err());
        assert!("xx".parse::<EvalMode>().is_err());
        assert!("".parse::<EvalMode>().is_err());
    }

    fn engine() -> (Engine, crate::dataset::SynthFixture) {
        let f = synth_fixture(11, 6, 3, 12).unwrap();
        let e = Engine::new(PipelineConfig::default(), f.passages.clone()).unwrap();
        (e, f)
    }

    #[test]
    fn planted_passage_ranks_first() {
        let (e, f) = engine();
        let d = &f.dialogs[0];
        let h = d.prefix(0);
        let t = e.run_turn(&TurnRequest::inference(&h, &d.personas)).unwrap();
        assert_eq!(
            Some(&t.retrieved[0].id),
            d.history.utterances[0].ground_knowledge_id.as_ref()
        );
    }

    #[test]
    fn zero_personas_yield_generic_response() {
        let (e, f) = engine();
        let h = f.dialogs[0].prefix(0);
        let t = e.run_turn(&TurnRequest::inference(&h, &PersonaSet::default())).unwrap();
        assert!(t.selected_personas.is_empty());
        assert!(!t.response.contains("which fits"));
    }

    #[test]
    fn chosen_has_max_reward_and_is_deterministic() {
        let (e, f) = engine();
        let d = &f.dialogs[1];
        let h = d.prefix(1);
        let a = e.run_turn(&TurnRequest::inference(&h, &d.personas)).unwrap();
        let b = e.run_turn(&TurnRequest::inference(&h, &d.personas)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.rewards.iter().all(|r| r.total <= a.rewards[a.chosen].total));
        assert_eq!(a.candidates.len(), e.config().generator.candidates);
    }

    #[test]
    fn current_response_is_not_read() {
        let (e, f) = engine();
        let d = &f.dialogs[0];
        let mut h = d.prefix(0);
        let base = e.run_turn(&TurnRequest::inference(&h, &d.personas)).unwrap();
        h.utterances[0] = Utterance::new(h.utterances[0].question.clone(), "leak", vec![0], None).unwrap();
        let other = e.run_turn(&TurnRequest::inference(&h, &d.personas)).unwrap();
        assert_eq!(base, other);
    }

    #[test]
    fn stage_labels_on_errors() {
        let (e, f) = engine();
        let d = &f.dialogs[0];
        let h = d.prefix(0);
        let mut req = TurnRequest::inference(&h, &d.personas);
        req.knowledge = KnowledgeSource::Ground("missing".into());
        match e.run_turn(&req) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "retrieve"),
            other => panic!("{other:?}"),
        }
    }
}
