use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pairsem::eval::{evaluate, parse_metrics, Qrels, Run};
use pairsem::matching::QueryMode;
use pairsem::pipeline::{
    rankings_file, run_file, write_synthetic_corpus, Pipeline, PipelineConfig, RunEvaluation, RunOptions, Stage,
    StageReport, SweepParam,
};
use pairsem::synth::SynthSpec;
use pairsem::{Error, Result};

#[derive(Parser)]
#[command(name = "pairsem", version, about = "Entity-aspect pair generation and pairwise semantic matching")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, short, global = true, default_value = "pairsem.toml")]
    config: PathBuf,
    /// Re-run stages that are up to date and accept stale inputs.
    #[arg(long, global = true)]
    force: bool,
    /// Exit non-zero when a stage finishes with warnings.
    #[arg(long, global = true)]
    strict: bool,
    /// Log progress to stderr (-vv for debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenMode {
    ZeroShot,
    Candidate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Entity,
    Aspect,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fast,
    Llm,
    Base,
}

impl From<Mode> for QueryMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fast => QueryMode::Fast,
            Mode::Llm => QueryMode::Llm,
            Mode::Base => QueryMode::Base,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted pairs and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract pairs for every document.
    GenPairs {
        #[arg(long, value_enum)]
        mode: GenMode,
    },
    /// Cluster and merge synonyms into the vocabulary.
    BuildVocab {
        #[arg(long)]
        max_cluster_size: Option<usize>,
    },
    /// Build per-document candidate lists.
    GenCandidates {
        #[arg(long = "M", alias = "m")]
        m: Option<usize>,
        #[arg(long)]
        knn: Option<usize>,
    },
    /// Compute distinctiveness soft labels.
    SoftLabels,
    /// Train a relevance predictor.
    Train {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        grid_search: bool,
    },
    /// Report predictor P@k over the corpus.
    EvalPredictors,
    /// Rank documents for every query and write a run file.
    Query {
        #[arg(long, value_enum, default_value = "fast")]
        mode: Mode,
        /// Documents per query in the run file.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        n_e: Option<usize>,
        #[arg(long)]
        n_a: Option<usize>,
        /// Also print the run (tsv) or scored rankings (json) to stdout.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Score run files against qrels.
    Eval {
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Comma-separated, e.g. ndcg@10,recall@20.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Re-run dependent stages for each value of a hyperparameter.
    Sweep {
        /// m, n_e, or n_a.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<usize>,
        #[arg(long, value_enum, default_value = "fast")]
        mode: Mode,
    },
    /// Summarize timing, tokens, cost, and metrics of every stage run.
    Report,
    /// Run every stage that is not up to date, then evaluate.
    All,
}

fn print_stage(r: &StageReport) {
    if r.up_to_date {
        println!("{}: up to date", r.stage);
        return;
    }
    let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={}", fmt_num(*v))).collect();
    println!("{}: done in {:.2}s; {}", r.stage, r.seconds, counts.join(" "));
    if r.llm.calls > 0 {
        println!(
            "  llm: {} calls, {} failures, {} prompt + {} completion tokens, ${:.4}",
            r.llm.calls, r.llm.failures, r.llm.prompt_tokens, r.llm.completion_tokens, r.cost_usd
        );
    }
    if r.warnings > 0 {
        println!("  warnings: {}", r.warnings);
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

fn print_evaluations(evals: &[RunEvaluation]) {
    for e in evals {
        let vals: Vec<String> = e.report.means.iter().map(|(m, v)| format!("{m}={v:.4}")).collect();
        println!("{}: {} ({} queries)", e.run, vals.join(" "), e.report.evaluated);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    if !cli.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", cli.config.display())));
    }
    PipelineConfig::load(&cli.config)
}

fn open(cli: &Cli, cfg: PipelineConfig) -> Result<Pipeline> {
    Pipeline::new(
        cfg,
        RunOptions {
            force: cli.force,
            strict: cli.strict,
        },
    )
}

fn stage(cli: &Cli, cfg: PipelineConfig, stage: Stage) -> Result<()> {
    let p = open(cli, cfg)?;
    let _lock = p.lock()?;
    print_stage(&p.run_stage(stage)?);
    Ok(())
}

fn standalone_eval(qrels: &Path, runs: &[PathBuf], metrics: &str) -> Result<()> {
    let qrels = Qrels::load(qrels)?;
    let metrics = parse_metrics(metrics)?;
    let evals: Vec<RunEvaluation> = runs
        .iter()
        .map(|r| {
            Ok(RunEvaluation {
                run: r.display().to_string(),
                report: evaluate(&Run::load(r)?, &qrels, &metrics),
            })
        })
        .collect::<Result<_>>()?;
    print_evaluations(&evals);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out, spec, seed } => {
            let mut s = match spec {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = *seed;
            }
            let summary = write_synthetic_corpus(&s, out)?;
            println!(
                "synth: {} documents, {} queries, {} entities, {} aspects, {:.2} pairs/doc, {:.2} aspects/entity",
                summary.documents,
                summary.queries,
                summary.entities,
                summary.aspects,
                summary.mean_pairs_per_doc,
                summary.mean_aspects_per_entity
            );
            if summary.config_written {
                println!("wrote {}", out.join("pairsem.toml").display());
            }
            Ok(())
        }
        Command::GenPairs { mode } => {
            let s = match mode {
                GenMode::ZeroShot => Stage::GenPairsZeroShot,
                GenMode::Candidate => Stage::GenPairsCandidate,
            };
            stage(cli, load_config(cli)?, s)
        }
        Command::BuildVocab { max_cluster_size } => {
            let mut cfg = load_config(cli)?;
            if let Some(v) = max_cluster_size {
                cfg.vocab.max_cluster_size = *v;
            }
            stage(cli, cfg, Stage::BuildVocab)
        }
        Command::GenCandidates { m, knn } => {
            let mut cfg = load_config(cli)?;
            if let Some(v) = m {
                cfg.candidates.m = *v;
            }
            if let Some(v) = knn {
                cfg.candidates.knn = *v;
            }
            stage(cli, cfg, Stage::GenCandidates)
        }
        Command::SoftLabels => stage(cli, load_config(cli)?, Stage::SoftLabels),
        Command::Train { target, grid_search } => {
            let mut cfg = load_config(cli)?;
            cfg.train.grid_search |= grid_search;
            let s = match target {
                Target::Entity => Stage::TrainEntity,
                Target::Aspect => Stage::TrainAspect,
            };
            stage(cli, cfg, s)
        }
        Command::EvalPredictors => stage(cli, load_config(cli)?, Stage::EvalPredictors),
        Command::Query {
            mode,
            k,
            pool,
            n_e,
            n_a,
            format,
        } => {
            let mut cfg = load_config(cli)?;
            let inf = &mut cfg.inference;
            for (slot, v) in [
                (&mut cfg.eval.run_depth, k),
                (&mut inf.rerank_pool_size, pool),
                (&mut inf.n_e, n_e),
                (&mut inf.n_a, n_a),
            ] {
                if let Some(v) = v {
                    *slot = *v;
                }
            }
            let mode = QueryMode::from(*mode);
            let p = open(cli, cfg)?;
            let _lock = p.lock()?;
            let report = p.run_stage(Stage::Query(mode))?;
            let file = match format {
                Some(Format::Tsv) => Some(run_file(mode)),
                Some(Format::Json) => Some(rankings_file(mode)),
                None => None,
            };
            match file {
                Some(f) => {
                    let path = p.workspace().path(&f);
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
                    print!("{text}");
                }
                None => print_stage(&report),
            }
            Ok(())
        }
        Command::Eval { qrels, runs, metrics } => {
            if !cli.config.is_file() {
                if let (Some(q), false) = (qrels, runs.is_empty()) {
                    let m = metrics.as_deref().unwrap_or("ndcg@10,ndcg@20,recall@20,recall@50");
                    return standalone_eval(q, runs, m);
                }
            }
            let p = open(cli, load_config(cli)?)?;
            let _lock = p.lock()?;
            let parsed = metrics.as_deref().map(parse_metrics).transpose()?;
            let evals = p.evaluate_runs(runs, qrels.as_deref(), parsed.as_deref())?;
            print_evaluations(&evals);
            Ok(())
        }
        Command::Sweep { param, values, mode } => {
            let param: SweepParam = param.parse()?;
            let p = open(cli, load_config(cli)?)?;
            let _lock = p.lock()?;
            let report = p.sweep(param, values, (*mode).into())?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Report => {
            let p = open(cli, load_config(cli)?)?;
            let _lock = p.lock()?;
            print!("{}", p.report()?.to_table());
            Ok(())
        }
        Command::All => {
            let p = open(cli, load_config(cli)?)?;
            let _lock = p.lock()?;
            let (reports, evals) = p.run_all()?;
            if reports.is_empty() {
                println!("all stages up to date");
            }
            reports.iter().for_each(print_stage);
            print_evaluations(&evals);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_dependency() { 2 } else { 1 })
        }
    }
}
