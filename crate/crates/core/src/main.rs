use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use krpo::config::{ConfigLayer, PipelineConfig, ScorerKind};
use krpo::gateway::ReplayMode;
use krpo::kg::KnowledgeGraph;
use krpo::metrics::MetricsReport;
use krpo::pipeline::{read_prompt_file, Pipeline, KG_FILE, PROMPT_FILE};

#[derive(Parser)]
#[command(name = "krpo", version, about = "Triplet extraction with self-evaluated prompt optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the extraction prompt on a dataset.
    Optimize(Common),
    /// Extract and canonicalize triplets into a knowledge graph.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Prompt to extract with (default: <out>/prompt_final.txt, else the initial prompt).
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    /// Score a knowledge graph against the dataset's gold triplets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Knowledge graph to score (default: <out>/kg.jsonl).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Optimize, extract and evaluate.
    Run(Common),
    /// Run the full pipeline against the live model, recording every response.
    RecordFixtures(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL dataset: one `{"id", "text", "gold"?}` object per line.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (default: out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Samples per prompt update (default: 5).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Candidate relations offered per canonicalization decision (default: 5).
    #[arg(long)]
    top_k: Option<usize>,
    /// Passes over the dataset during optimization (default: 1).
    #[arg(long)]
    epochs: Option<usize>,
    /// Schema similarity backend (default: lexical).
    #[arg(long, value_parser = ["remote", "lexical"])]
    scorer: Option<String>,
    /// Base URL of the remote scorer; requests go to `<url>/score`.
    #[arg(long)]
    scorer_endpoint: Option<String>,
    /// Fail instead of using lexical scores when the remote scorer is down.
    #[arg(long)]
    no_scorer_fallback: bool,
    /// Model call mode: record responses, replay them only, or call live (default: off).
    #[arg(long, value_parser = ["record", "replay", "off"])]
    replay: Option<String>,
    /// Directory of recorded model responses (default: replay).
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// Tab-separated `relation<TAB>schema` lines pre-loaded into memory.
    #[arg(long)]
    seed_relations: Option<PathBuf>,
    /// Character budget for the batch context sent to the prompt rewrite.
    #[arg(long)]
    context_budget: Option<usize>,
    /// Worker threads for per-sentence model calls.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Revert a prompt update when the next batch scores lower.
    #[arg(long)]
    guarded_updates: bool,
    /// Add windowed F1 columns to the score series when gold is available.
    #[arg(long)]
    eval_during_optimize: bool,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
    /// File holding the starting extraction prompt.
    #[arg(long)]
    initial_prompt: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, force_replay: Option<ReplayMode>) -> Result<PipelineConfig> {
        let file = self.config.as_deref().map(ConfigLayer::from_toml_file).transpose()?;
        let replay = match force_replay {
            Some(mode) => Some(mode),
            None => self.replay.as_deref().map(str::parse).transpose().map_err(anyhow::Error::msg)?,
        };
        let flags = ConfigLayer {
            dataset: self.dataset.clone(),
            out: self.out.clone(),
            batch_size: self.batch_size,
            top_k: self.top_k,
            epochs: self.epochs,
            scorer: self.scorer.as_deref().map(str::parse::<ScorerKind>).transpose()?,
            scorer_endpoint: self.scorer_endpoint.clone(),
            fallback_to_lexical: self.no_scorer_fallback.then_some(false),
            replay,
            replay_dir: self.replay_dir.clone(),
            seed_relations: self.seed_relations.clone(),
            context_budget: self.context_budget,
            parallelism: self.parallelism,
            guarded_updates: self.guarded_updates.then_some(true),
            eval_during_optimize: self.eval_during_optimize.then_some(true),
            prompts_dir: self.prompts_dir.clone(),
            initial_prompt: self.initial_prompt.clone(),
            window: None,
            consistency_scores: None,
        };
        Ok(PipelineConfig::resolve(file, flags)?)
    }
}

fn print_report(report: &MetricsReport) {
    for (name, prf) in
        [("strict", &report.modes.strict), ("exact", &report.modes.exact), ("partial", &report.modes.partial)]
    {
        println!("{name:8} P={:.4} R={:.4} F1={:.4}", prf.precision, prf.recall, prf.f1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Optimize(common) => {
            let pipeline = Pipeline::new(common.resolve(None)?)?;
            let dataset = pipeline.load_dataset()?;
            let outcome = pipeline.run_phase1(&dataset)?;
            println!("prompt version {} after {} samples", outcome.prompt.version(), outcome.trace.len());
        }
        Command::Extract { common, prompt } => {
            let pipeline = Pipeline::new(common.resolve(None)?)?;
            let dataset = pipeline.load_dataset()?;
            let optimized = pipeline.config().out.join(PROMPT_FILE);
            let prompt = match prompt {
                Some(path) => read_prompt_file(&path)?,
                None if optimized.exists() => read_prompt_file(&optimized)?,
                None => pipeline.initial_prompt()?,
            };
            let outcome = pipeline.run_phase2(&dataset, &prompt)?;
            println!("{} triples, {} canonical relations", outcome.kg.len(), outcome.memory.len());
        }
        Command::Eval { common, predictions } => {
            let config = common.resolve(None)?;
            let path = predictions.unwrap_or_else(|| config.out.join(KG_FILE));
            let kg = KnowledgeGraph::import(&path)
                .with_context(|| format!("loading predictions from {}", path.display()))?;
            let dataset = krpo::pipeline::load_dataset(config.dataset_path()?)?;
            // Scoring never calls the model, so no gateway is configured.
            let pipeline = Pipeline::with_gateway(config, krpo::gateway::Gateway::replay("/nonexistent"))?;
            print_report(&pipeline.run_eval(&dataset, &kg)?);
        }
        Command::Run(common) => report_run(Pipeline::new(common.resolve(None)?)?)?,
        Command::RecordFixtures(common) => report_run(Pipeline::new(common.resolve(Some(ReplayMode::Record))?)?)?,
    }
    Ok(())
}

fn report_run(pipeline: Pipeline) -> Result<()> {
    match pipeline.run_all()? {
        Some(report) => print_report(&report),
        None => println!("no gold triplets; evaluation skipped"),
    }
    let stats = pipeline.gateway().stats();
    tracing::info!(
        requests = stats.total_requests(),
        live = stats.live_calls(),
        replayed = stats.store_hits(),
        "model calls"
    );
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("KRPO_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
