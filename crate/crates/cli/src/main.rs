//! `cascade`: build indexes, run the retrieve-then-rerank cascade, mine hard
//! negatives and run the evaluation harness.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::AppConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cascade", version, about = "Reasoning-based retrieval cascade")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "CASCADE_CONFIG")]
    config: Option<PathBuf>,
    /// Log level for stderr diagnostics (error, warn, info, debug, trace).
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted relevance.
    Synth(SynthArgs),
    /// Validate an embeddings file and write it as an index.
    BuildIndex(BuildIndexArgs),
    /// Stage-1 embedding retrieval only.
    Retrieve(QueryArgs),
    /// Retrieval followed by trace-based reranking.
    Rerank(QueryArgs),
    /// The configured cascade, rewriting included when enabled.
    Pipeline(QueryArgs),
    /// Mine hard negatives for training pairs.
    Mine(MineArgs),
    /// Check a mined dataset and estimate its false-negative ratio.
    Audit(AuditArgs),
    /// Run an experiment grid over a synthetic corpus.
    Experiment(ExperimentArgs),
    /// Compare mining strategies by training a toy embedder.
    ToyTrain(ToyArgs),
    /// Check a corpus against its embeddings.
    Validate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    NearDuplicate,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "standard")]
    preset: Preset,
    #[arg(long)]
    n_candidates: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    /// Embeddings file; defaults to `paths.embeddings`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
struct QueryArgs {
    /// Query ids; all queries when omitted.
    #[arg(long = "query-id")]
    query_ids: Vec<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// pairwise, listwise or none.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, value_enum)]
    qar: Option<OnOff>,
    /// Reranker backend id; `sim` picks the simulated one for the mode.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Summary report path; defaults to `<output_dir>/<command>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// `uniform` or `softmax:TEMP`.
    #[arg(long)]
    weights: Option<String>,
    /// reranker, embedder, random or naive_top_k.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Mined dataset; defaults to `<output_dir>/mined.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    max_failure_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    mined: PathBuf,
    #[arg(long, default_value = "sim-judge")]
    judge: String,
    #[arg(long, default_value_t = 500)]
    sample: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment description (TOML, or JSON by extension).
    #[arg(long)]
    grid: PathBuf,
    /// Output directory; defaults to `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Study description (TOML, or JSON by extension); defaults built in.
    #[arg(long)]
    study: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging(level: &str) -> Result<(), CliError> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| CliError::Config(format!("unknown log level `{level}`")))?;
    env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init()
        .ok();
    Ok(())
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    init_logging(cli.log_level.as_deref().unwrap_or(&cfg.logging.level))?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::BuildIndex(a) => commands::build_index(&cfg, &a, out),
        Command::Retrieve(a) => commands::query(&cfg, commands::QueryCommand::Retrieve, &a, out),
        Command::Rerank(a) => commands::query(&cfg, commands::QueryCommand::Rerank, &a, out),
        Command::Pipeline(a) => commands::query(&cfg, commands::QueryCommand::Pipeline, &a, out),
        Command::Mine(a) => {
            commands::install_interrupt_handler();
            commands::mine(&cfg, &a, out)
        }
        Command::Audit(a) => commands::audit(&cfg, &a, out),
        Command::Experiment(a) => commands::experiment(&cfg, &a, out),
        Command::ToyTrain(a) => commands::toy_train(&cfg, &a, out),
        Command::Validate => commands::validate(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out).and_then(|()| out.flush().map_err(CliError::from)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
