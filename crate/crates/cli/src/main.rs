mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use statute_core::corpus::Split;
use statute_core::llm::PromptMode;

/// Statute prediction from case facts: attention-over-sentences training,
/// attention explanations with counterfactual checks, and LLM verification.
///
/// Stages share one output directory by default: `ingest` writes `data/`,
/// `embed` writes `embeddings/`, `train` writes `checkpoint.ckpt`, and the
/// later stages read those back.
#[derive(Debug, Parser)]
#[command(name = "statute", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled keyword-labelled synthetic corpus and its training recipe.
    Synth,
    /// Validate, mask and truncate a raw corpus into `<out>/data`.
    Ingest(IngestArgs),
    /// Embed statutes and case sentences into `<out>/embeddings`.
    Embed(EmbedArgs),
    /// Train the attention model and write `checkpoint.ckpt`.
    Train(InputArgs),
    /// Write `predictions.jsonl` for a split or case file.
    Predict(InputArgs),
    /// Write attention explanations for every predicted statute.
    Explain(InputArgs),
    /// Score predictions against gold labels into `metrics.json`.
    Eval(EvalArgs),
    /// Necessity and sufficiency of the explanations into `nfsf.json`.
    Nfsf(InputArgs),
    /// Verify the model's top-k statutes with an LLM.
    Llm(LlmArgs),
    /// Per-statute table with training frequency and confusable statutes.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Statute JSON-lines file.
    #[arg(long)]
    pub statutes: Option<PathBuf>,
    /// Manifest naming the train, dev and test case files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Ingested dataset directory [default: <out>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Replace statute-content embeddings with seeded random vectors.
    #[arg(long)]
    pub random_statutes: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Ingested dataset directory [default: <out>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Embedded corpus directory [default: <out>/embeddings].
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Model checkpoint [default: <out>/checkpoint.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to run on.
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    /// Case file to run on instead of a split; its cases must be embedded.
    #[arg(long)]
    pub cases: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSON lines [default: <out>/predictions.jsonl].
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Gold labels in the case file format.
    #[arg(long)]
    pub gold: PathBuf,
    /// Statute file fixing the label set; without it the label set is every
    /// name seen in either file.
    #[arg(long)]
    pub statutes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LlmArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Statutes per case sent to the LLM, taken from the model's ranking.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = PromptMode::Standard)]
    pub mode: PromptMode,
    /// Answer prompts from a recorded fixture instead of the network.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Record live responses into this fixture file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Chat-completions URL, overriding the config.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name, overriding the config.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Predictions JSON lines [default: <out>/predictions.jsonl].
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::exit_code(&e))
        }
    }
}
