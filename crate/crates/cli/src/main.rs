use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kperm_core::dataset::{
    convert_focus_json, focus_published_stats, load_dataset, synth_fixture, validate_stats, write_dataset, Dataset,
};
use kperm_core::generation::{ChatClientConfig, HttpChatClient, PromptMode};
use kperm_core::model::{DialogHistory, Utterance};
use kperm_core::pipeline::{
    augment, bench_retrievers, evaluate, EmbedderSection, Engine, EvalMode, IndexBundle, PipelineConfig, TurnRequest,
};
use kperm_core::retrieval::{
    parse_corpus_jsonl, retrieve_rank, EmbeddingScorer, PassageScorer, RetrieveRankConfig, Stage1Method, Stage1Scorer,
};
use kperm_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CLIENT: u8 = 3;

#[derive(Parser)]
#[command(name = "kperm", version, about = "Knowledge-guided personalized response engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Any problem with the configuration is a usage error.
    fn load(&self) -> Result<PipelineConfig, Failure> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(Error::io(p, e).to_string()))?,
            None => String::new(),
        };
        PipelineConfig::from_toml_with_overrides(&text, &self.set).map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus and write an index bundle.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// `hash`, `hash:<dim>:<seed>` or `store:<path>`.
        #[arg(long, default_value = "hash")]
        embedder: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Query an index bundle.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// tfidf, bm25, dense or lsh.
        #[arg(long, default_value = "dense")]
        method: String,
        /// Stage-2 scorer (`identity` or `embedding`); without it the
        /// stage-1 ranking is returned.
        #[arg(long)]
        rerank: Option<String>,
        #[arg(long, default_value_t = 100)]
        pool: usize,
    },
    /// Run one turn for a dataset dialog with a new question.
    Respond {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dialog: String,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score an ablation mode over a dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// gp, sp, allp, nop, gk or combinations such as gk+gp.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        report: PathBuf,
        /// Also write every turn trace as JSON Lines.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retriever grid over methods, k and query variants.
    BenchRetrievers {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "5,10,15,20", value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, default_value = "tfidf,bm25,dense,lsh", value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Prompt a chat-completion endpoint with and without engine responses.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "M1,M2,M3,M4", value_delimiter = ',')]
        modes: Vec<String>,
        /// Base URL; overrides the config and the environment.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        dialogs: usize,
        #[arg(long, default_value_t = 5)]
        personas: usize,
        /// Defaults to three passages per dialog.
        #[arg(long)]
        passages: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics, optionally against the published FoCus counts.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        expect_focus: bool,
    },
    /// Convert FoCus JSON files into a dataset directory.
    ConvertFocus {
        /// `<split>=<path>`; repeatable.
        #[arg(long = "input", value_name = "SPLIT=PATH", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
    Client(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn parse_method(s: &str) -> Result<Stage1Method, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn engine_for(dataset: &Dataset, cfg: PipelineConfig) -> Result<Engine, Error> {
    match cfg.paths.index.clone() {
        Some(p) => Engine::from_bundle(cfg, IndexBundle::load(p)?),
        None => Engine::new(cfg, dataset.corpus.passages().to_vec()),
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Index {
            corpus,
            embedder,
            out,
            seed,
        } => {
            let spec: EmbedderSection = embedder.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let text = std::fs::read_to_string(&corpus).map_err(|e| Error::io(&corpus, e))?;
            let passages = parse_corpus_jsonl(&text, &corpus.display().to_string())?;
            let n = passages.len();
            let bundle = IndexBundle::build(spec, passages, seed)?;
            bundle.save(&out)?;
            eprintln!("indexed {n} passages into {}", out.display());
        }
        Command::Retrieve {
            index,
            query,
            k,
            method,
            rerank,
            pool,
        } => {
            let method = parse_method(&method)?;
            let mut cfg = PipelineConfig::default();
            cfg.retrieval.stage1 = method;
            let engine = Engine::from_bundle(cfg, IndexBundle::load(&index)?)?;
            let mut engine = engine;
            if method == Stage1Method::DenseLsh {
                engine.ensure_lsh()?;
            }
            let retriever = engine.retriever();
            let got = match rerank.as_deref() {
                None => retriever.retrieve(method, &query, k)?,
                Some(name) => {
                    let scorer: Box<dyn PassageScorer + '_> = match name {
                        "identity" => Box::new(Stage1Scorer),
                        "embedding" => Box::new(EmbeddingScorer::new(engine.provider())),
                        other => return Err(Failure::Usage(format!("unknown rerank scorer `{other}`"))),
                    };
                    let rr = RetrieveRankConfig {
                        stage1: method,
                        pool: pool.max(k),
                        k,
                        ..RetrieveRankConfig::default()
                    };
                    retrieve_rank(&retriever, &query, &rr, &*scorer)?
                }
            };
            let rows: Vec<serde_json::Value> = got
                .entries
                .iter()
                .map(|e| {
                    let p = engine.corpus().get(&e.id).expect("retrieved ids resolve");
                    serde_json::json!({"id": e.id, "score": e.score, "topic": p.topic, "body": p.body})
                })
                .collect();
            print!("{}", json(&rows));
        }
        Command::Respond {
            dataset,
            dialog,
            query,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&dataset)?;
            let d = ds
                .dialog(&dialog)
                .ok_or_else(|| Failure::Usage(format!("no dialog `{dialog}` in {}", dataset.display())))?;
            let mut utterances = d.history.utterances.clone();
            utterances.push(Utterance::new(query, "", vec![], None).map_err(|e| Failure::Usage(e.to_string()))?);
            let history = DialogHistory::new(d.topic(), utterances);
            let engine = engine_for(&ds, cfg)?;
            let trace = engine.run_turn(&TurnRequest::inference(&history, &d.personas))?;
            print!("{}", json(&trace));
        }
        Command::Evaluate {
            dataset,
            mode,
            report,
            traces,
            cfg,
        } => {
            let mode: EvalMode = mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let cfg = cfg.load()?;
            let ds = load_dataset(&dataset)?;
            let engine = engine_for(&ds, cfg)?;
            let out = evaluate(&engine, &ds, mode)?;
            write_file(&report, &(out.report.to_json() + "\n"))?;
            if let Some(path) = traces {
                let mut body = String::new();
                for t in &out.traces {
                    body.push_str(&serde_json::to_string(t).expect("trace serializes"));
                    body.push('\n');
                }
                write_file(&path, &body)?;
            }
            let a = &out.report.aggregates;
            eprintln!(
                "{mode}: {} turns scored, {} failed; bleu {:.4} corpus_bleu {:.4} rouge1 {:.4} rougeL {:.4} embed_f1 {:.4}",
                a.scored, a.failed, a.bleu, a.corpus_bleu, a.rouge1, a.rouge_l, a.embed_f1
            );
        }
        Command::BenchRetrievers {
            dataset,
            k,
            methods,
            report,
            cfg,
        } => {
            let methods = methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>, _>>()?;
            let cfg = cfg.load()?;
            let ds = load_dataset(&dataset)?;
            let engine = engine_for(&ds, cfg)?;
            let grid = bench_retrievers(&engine, &ds, &methods, &k)?;
            write_file(&report, &json(&grid))?;
            eprint!("{}", grid.to_table());
        }
        Command::Augment {
            dataset,
            modes,
            endpoint,
            report,
            cfg,
        } => {
            let modes = modes
                .iter()
                .map(|m| m.parse::<PromptMode>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let cfg = cfg.load()?;
            let mut client_cfg: ChatClientConfig = cfg.client.clone().with_env_overrides();
            if let Some(e) = endpoint {
                client_cfg.endpoint = e;
            }
            let client = HttpChatClient::new(client_cfg)?;
            let ds = load_dataset(&dataset)?;
            let threshold = cfg.harness.client_failure_threshold;
            let engine = engine_for(&ds, cfg)?;
            let out = augment(&engine, &ds, &modes, &client)?;
            write_file(&report, &json(&out))?;
            eprint!("{}", out.to_table());
            if out.failure_rate() > threshold {
                return Err(Failure::Client(format!(
                    "{} of {} chat requests failed (threshold {threshold})",
                    out.client_failures, out.requests
                )));
            }
        }
        Command::Synth {
            seed,
            dialogs,
            personas,
            passages,
            out,
        } => {
            let n_passages = passages.unwrap_or(dialogs.saturating_mul(3));
            let f = synth_fixture(seed, dialogs, personas, n_passages).map_err(|e| Failure::Usage(e.to_string()))?;
            write_dataset(&out, &f.dialogs, &f.passages)?;
            eprintln!(
                "wrote {} dialogs and {} passages to {}",
                f.dialogs.len(),
                f.passages.len(),
                out.display()
            );
        }
        Command::Stats { dataset, expect_focus } => {
            let ds = load_dataset(&dataset)?;
            let mut v = serde_json::json!({ "stats": ds.stats });
            if expect_focus {
                v["mismatches"] =
                    serde_json::to_value(validate_stats(&ds.stats, &focus_published_stats())).expect("json");
            }
            print!("{}", json(&v));
        }
        Command::ConvertFocus { inputs, out } => {
            let mut dialogs = Vec::new();
            let mut passages = Vec::new();
            for spec in inputs {
                let (split, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(format!("`{spec}` is not <split>=<path>")))?;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let (d, p) = convert_focus_json(&text, split)?;
                dialogs.extend(d);
                passages.extend(p);
            }
            Dataset::new(dialogs.clone(), passages.clone())?;
            write_dataset(&out, &dialogs, &passages)?;
            eprintln!(
                "wrote {} dialogs and {} passages to {}",
                dialogs.len(),
                passages.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            if e.is_client_error() {
                ExitCode::from(EXIT_CLIENT)
            } else if matches!(e, Error::Config(_)) {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
        Err(Failure::Client(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CLIENT)
        }
    }
}
