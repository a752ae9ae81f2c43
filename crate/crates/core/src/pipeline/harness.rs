//! Dataset-level runs: ablation evaluation, the retriever benchmark grid
//! and chat-model augmentation. Turns run in parallel; results are merged
//! in dialog then turn order so reports do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Dialog};
use crate::error::{Error, Result};
use crate::generation::{build_prompt, prompt_template_hash, ChatBackend, PromptMode, PROMPT_TEMPLATE_VERSION};
use crate::metrics::{embed_f1, score_pair, MetricReport, ReportItem};
use crate::persona_select::persona_loss;
use crate::retrieval::{rewrite_query, LshIndex, QueryRewriter, Stage1Method, TopicAppendRewriter};

use super::{Engine, EvalMode, PersonaMode, TurnRequest, TurnTrace};

/// `(dialog index, turn index)` pairs to run, honoring the configured split
/// and turn limit.
pub fn turn_refs(dataset: &Dataset, split: Option<&str>, max_turns: Option<usize>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = dataset
        .dialogs
        .iter()
        .enumerate()
        .filter(|(_, d)| split.is_none_or(|s| d.split == s))
        .flat_map(|(i, d)| (0..d.history.utterances.len()).map(move |t| (i, t)))
        .collect();
    if let Some(m) = max_turns {
        out.truncate(m);
    }
    out
}

fn item_id(d: &Dialog, t: usize) -> String {
    format!("{}#{t}", d.id)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn harness_turns(engine: &Engine, dataset: &Dataset) -> Vec<(usize, usize)> {
    let h = &engine.config().harness;
    turn_refs(dataset, h.split.as_deref(), h.max_turns)
}

/// Runs `mode` on one dataset turn with the ground response as the
/// reranking reference.
fn eval_turn(engine: &Engine, d: &Dialog, t: usize, mode: EvalMode) -> Result<TurnTrace> {
    let u = &d.history.utterances[t];
    let history = d.prefix(t);
    let req = TurnRequest {
        history: &history,
        personas: &d.personas,
        knowledge: mode.knowledge_source(u.ground_knowledge_id.as_deref())?,
        persona: mode.persona_source(&u.ground_persona_indices),
        reference: Some(&u.response),
        persona_truth: Some(&u.ground_persona_indices),
    };
    let mut trace = engine.run_turn(&req)?;
    let (row, _) = score_pair(
        &u.response,
        &trace.response,
        engine.provider(),
        &engine.config().reward.bleu,
    )?;
    trace.metrics = Some(row);
    Ok(trace)
}

fn scored_item(engine: &Engine, d: &Dialog, t: usize, text: &str, used: Option<&[usize]>) -> Result<ReportItem> {
    let u = &d.history.utterances[t];
    let (row, stats) = score_pair(&u.response, text, engine.provider(), &engine.config().reward.bleu)?;
    let mut item = ReportItem::scored(item_id(d, t), row, stats);
    if let Some(used) = used {
        item.persona_agreement = Some(1.0 - persona_loss(used, &u.ground_persona_indices, d.personas.len())?);
    }
    Ok(item)
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Per-item traces in report order; `None` where the turn failed.
    pub traces: Vec<Option<TurnTrace>>,
}

/// Scores every turn under `mode` against the ground responses. Failed
/// turns are recorded in the report and skipped.
pub fn evaluate(engine: &Engine, dataset: &Dataset, mode: EvalMode) -> Result<EvalOutcome> {
    let refs = harness_turns(engine, dataset);
    let results: Vec<(ReportItem, Option<TurnTrace>)> = in_pool(engine.config().harness.workers, || {
        refs.par_iter()
            .map(|&(di, t)| {
                let d = &dataset.dialogs[di];
                let run = eval_turn(engine, d, t, mode).and_then(|trace| {
                    Ok((
                        scored_item(engine, d, t, &trace.response, Some(&trace.selected_personas))?,
                        trace,
                    ))
                });
                match run {
                    Ok((item, trace)) => (item, Some(trace)),
                    Err(e) => {
                        log::warn!("{}: {e}", item_id(d, t));
                        (ReportItem::failed(item_id(d, t), e.to_string()), None)
                    }
                }
            })
            .collect()
    })?;
    let (items, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut report = MetricReport::new(format!("evaluate:{mode}"), items, &engine.config().reward.bleu);
    report.config = Some(serde_json::json!({
        "mode": mode.to_string(),
        "pipeline": engine.config(),
    }));
    Ok(EvalOutcome { report, traces })
}

pub const GRID_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: Stage1Method,
    /// Mean best embed-F1 per k, plain questions.
    pub original: Vec<f64>,
    /// Same with the rewritten questions.
    pub rewritten: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverGrid {
    pub schema_version: u32,
    pub k_grid: Vec<usize>,
    pub rewriter: String,
    pub turns: usize,
    pub rows: Vec<GridRow>,
}

impl RetrieverGrid {
    /// Plain-text table: methods as rows, k as columns, one column group
    /// per query variant.
    pub fn to_table(&self) -> String {
        let ks: Vec<String> = self.k_grid.iter().map(|k| format!("{k:>6}")).collect();
        let mut out = format!(
            "{:<12}| original{}| rewritten{}\n",
            "",
            " ".repeat(7 * ks.len() - 8),
            " ".repeat(7 * ks.len() - 9)
        );
        out.push_str(&format!("{:<12}|{} |{} \n", "method", ks.join(" "), ks.join(" ")));
        for r in &self.rows {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:>6.4}")).collect::<Vec<_>>().join(" ");
            out.push_str(&format!(
                "{:<12}|{} |{} \n",
                r.method.as_str(),
                fmt(&r.original),
                fmt(&r.rewritten)
            ));
        }
        out
    }
}

/// Best embed-F1 against `ground` over each prefix of `bodies` of length
/// `k`, for every `k` in `k_grid`. An empty retrieval scores 0.
fn prefix_scores(engine: &Engine, bodies: &[&str], ground: &str, k_grid: &[usize]) -> Result<Vec<f64>> {
    let mut best = Vec::with_capacity(bodies.len());
    let mut running = 0.0f64;
    for b in bodies {
        running = running.max(embed_f1(ground, b, engine.provider(), None)?);
        best.push(running);
    }
    Ok(k_grid
        .iter()
        .map(|&k| best.get(k.min(bodies.len()).wrapping_sub(1)).copied().unwrap_or(0.0))
        .collect())
}

/// Mean retriever score (best embed-F1 between the ground knowledge and
/// any of the top `k` passages) for each method, `k` and query variant.
/// The rewritten variant appends the dialog topic to the question.
pub fn bench_retrievers(
    engine: &Engine,
    dataset: &Dataset,
    methods: &[Stage1Method],
    k_grid: &[usize],
) -> Result<RetrieverGrid> {
    if k_grid.is_empty() || k_grid.contains(&0) {
        return Err(Error::range("k grid", "needs at least one k, all at least 1"));
    }
    let k_max = *k_grid.iter().max().expect("non-empty");
    let lsh_local;
    let mut retriever = engine.retriever();
    if methods.contains(&Stage1Method::DenseLsh) && retriever.lsh.is_none() {
        let r = &engine.config().retrieval;
        lsh_local = LshIndex::build(engine.dense(), r.lsh_tables, r.lsh_bits, engine.config().seed)?;
        retriever = retriever.with_lsh(&lsh_local);
    }
    let rewriter = TopicAppendRewriter;
    let refs: Vec<(usize, usize)> = harness_turns(engine, dataset)
        .into_iter()
        .filter(|&(d, t)| dataset.dialogs[d].history.utterances[t].ground_knowledge_id.is_some())
        .collect();
    if refs.is_empty() {
        return Err(Error::Invalid("no turns with ground knowledge to benchmark".into()));
    }

    // per turn: per method: (original, rewritten)
    let per_turn: Vec<Vec<(Vec<f64>, Vec<f64>)>> = in_pool(engine.config().harness.workers, || {
        refs.par_iter()
            .map(|&(di, t)| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
                let d = &dataset.dialogs[di];
                let u = &d.history.utterances[t];
                let gk = u.ground_knowledge_id.as_deref().expect("filtered");
                let ground = &engine
                    .corpus()
                    .get(gk)
                    .ok_or_else(|| Error::Invalid(format!("passage `{gk}` not in corpus")))?
                    .body;
                let rewritten = rewrite_query(&u.question, d.topic(), &rewriter).text;
                methods
                    .iter()
                    .map(|&m| {
                        let mut pair = Vec::with_capacity(2);
                        for q in [&u.question, &rewritten] {
                            let got = retriever.retrieve(m, q, k_max)?;
                            let bodies: Vec<&str> = engine.corpus().resolve(&got).map(|p| p.body.as_str()).collect();
                            pair.push(prefix_scores(engine, &bodies, ground, k_grid)?);
                        }
                        let rw = pair.pop().expect("two");
                        Ok((pair.pop().expect("two"), rw))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let n = per_turn.len() as f64;
    let rows = methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let mut original = vec![0.0; k_grid.len()];
            let mut rewritten = vec![0.0; k_grid.len()];
            for turn in &per_turn {
                for (acc, v) in original.iter_mut().zip(&turn[mi].0) {
                    *acc += v;
                }
                for (acc, v) in rewritten.iter_mut().zip(&turn[mi].1) {
                    *acc += v;
                }
            }
            original.iter_mut().chain(rewritten.iter_mut()).for_each(|x| *x /= n);
            GridRow {
                method,
                original,
                rewritten,
            }
        })
        .collect();
    Ok(RetrieverGrid {
        schema_version: GRID_SCHEMA_VERSION,
        k_grid: k_grid.to_vec(),
        rewriter: rewriter.name().to_string(),
        turns: per_turn.len(),
        rows,
    })
}

/// Persona policy whose engine response a prompt mode embeds.
fn engine_persona_mode(mode: PromptMode) -> Option<PersonaMode> {
    match mode {
        PromptMode::M1 => None,
        PromptMode::M2 => Some(PersonaMode::All),
        PromptMode::M3 => Some(PersonaMode::Ground),
        PromptMode::M4 => Some(PersonaMode::Selected),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: PromptMode,
    pub report: MetricReport,
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    pub mode: PromptMode,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub embed_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub schema_version: u32,
    pub template_version: String,
    pub template_hash: String,
    pub requests: usize,
    pub client_failures: usize,
    pub table: Vec<AugmentRow>,
    pub modes: Vec<ModeReport>,
}

impl AugmentReport {
    pub fn failure_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.client_failures as f64 / self.requests as f64
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<5}{:>8}{:>8}{:>8}{:>8}{:>10}\n",
            "mode", "BLEU", "R1", "R2", "RL", "embed_f1"
        );
        for r in &self.table {
            out.push_str(&format!(
                "{:<5}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>10.4}\n",
                r.mode.to_string(),
                r.bleu,
                r.rouge1,
                r.rouge2,
                r.rouge_l,
                r.embed_f1
            ));
        }
        out
    }
}

enum Outcome {
    /// Failed before a request was sent.
    NotSent(ReportItem),
    Answered(ReportItem),
    ClientFailure(ReportItem),
}

/// Prompts the chat backend in each mode and scores its answers against
/// the ground responses. M2 to M4 embed the engine response produced with
/// retrieved knowledge and all, ground or selected personas. Engine and
/// client failures are recorded per turn and never abort the run.
pub fn augment(
    engine: &Engine,
    dataset: &Dataset,
    modes: &[PromptMode],
    backend: &dyn ChatBackend,
) -> Result<AugmentReport> {
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    if modes.is_empty() {
        return Err(Error::Invalid("no augmentation modes requested".into()));
    }
    let refs = harness_turns(engine, dataset);
    let per_turn: Vec<Vec<Outcome>> = in_pool(engine.config().harness.workers, || {
        refs.par_iter()
            .map(|&(di, t)| {
                let d = &dataset.dialogs[di];
                let u = &d.history.utterances[t];
                let id = item_id(d, t);
                let history = d.prefix(t);
                modes
                    .iter()
                    .map(|&mode| {
                        let engine_response = match engine_persona_mode(mode) {
                            None => None,
                            Some(p) => match eval_turn(engine, d, t, EvalMode::new(false, p)) {
                                Ok(trace) => Some(trace.response),
                                Err(e) => return Outcome::NotSent(ReportItem::failed(&id, format!("engine: {e}"))),
                            },
                        };
                        let messages = match build_prompt(mode, &u.question, &history, engine_response.as_deref()) {
                            Ok(m) => m,
                            Err(e) => return Outcome::NotSent(ReportItem::failed(&id, e.to_string())),
                        };
                        match backend.complete(&messages) {
                            Ok(text) => match scored_item(engine, d, t, &text, None) {
                                Ok(item) => Outcome::Answered(item),
                                Err(e) => Outcome::Answered(ReportItem::failed(&id, e.to_string())),
                            },
                            Err(e) => {
                                log::warn!("{id} {mode}: {e}");
                                Outcome::ClientFailure(ReportItem::failed(&id, format!("client: {e}")))
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    })?;

    let bleu_cfg = &engine.config().reward.bleu;
    let mut client_failures = 0;
    let mut requests = 0;
    let mut by_mode: Vec<Vec<ReportItem>> = vec![Vec::with_capacity(per_turn.len()); modes.len()];
    for turn in per_turn {
        for (mi, outcome) in turn.into_iter().enumerate() {
            let item = match outcome {
                Outcome::NotSent(item) => item,
                Outcome::Answered(item) => {
                    requests += 1;
                    item
                }
                Outcome::ClientFailure(item) => {
                    requests += 1;
                    client_failures += 1;
                    item
                }
            };
            by_mode[mi].push(item);
        }
    }
    let reports: Vec<ModeReport> = modes
        .iter()
        .zip(by_mode)
        .map(|(&mode, items)| ModeReport {
            mode,
            report: MetricReport::new(format!("augment:{mode}"), items, bleu_cfg),
        })
        .collect();
    let table = reports
        .iter()
        .map(|m| {
            let a = &m.report.aggregates;
            AugmentRow {
                mode: m.mode,
                bleu: a.bleu,
                rouge1: a.rouge1,
                rouge2: a.rouge2,
                rouge_l: a.rouge_l,
                embed_f1: a.embed_f1,
            }
        })
        .collect();
    Ok(AugmentReport {
        schema_version: GRID_SCHEMA_VERSION,
        template_version: PROMPT_TEMPLATE_VERSION.to_string(),
        template_hash: prompt_template_hash(),
        requests,
        client_failures,
        table,
        modes: reports,
    })
}
