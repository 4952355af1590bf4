//! `ltrpo`: build datasets, train, evaluate, rank and serve.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ltrpo_core::ErrorClass;
use ltrpo_service::ServiceError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(ltrpo_core::Error),
    Service(ServiceError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Service(e) => write!(f, "{e}"),
        }
    }
}

impl From<ltrpo_core::Error> for CliError {
    fn from(e: ltrpo_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(c) => CliError::Core(c),
            other => CliError::Service(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let class = match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Io(_) => ErrorClass::Data,
            CliError::Core(e) => e.class(),
            CliError::Service(ServiceError::StaleIndex(_)) => ErrorClass::Model,
            CliError::Service(ServiceError::TopK { .. }) => ErrorClass::Usage,
            CliError::Service(_) => ErrorClass::Data,
        };
        match class {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Model => 4,
            ErrorClass::Numeric => 5,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ltrpo", version, about = "Learning-to-rank object retrieval toolkit")]
pub struct Cli {
    /// TOML file with [backbone], [model], [train], [synth] and [serve] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Feature backbone: stub or clip.
    #[arg(long, global = true)]
    pub backbone: Option<String>,
    /// Embedding cache root.
    #[arg(long, global = true, env = "LTRPO_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert REVERIE-style annotations into a manifest.
    Import(ImportArgs),
    /// Generate the synthetic desk-scale corpus.
    Synth(SynthArgs),
    /// Train a ranker and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Rank one environment for one instruction.
    Rank(RankArgs),
    /// Run the HTTP ranking service.
    Serve(ServeArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_c: usize,
    /// Unseen environments assigned to validation; the rest become test.
    #[arg(long, default_value_t = 4)]
    pub val_envs: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub environments: Option<usize>,
    #[arg(long)]
    pub candidates_per_env: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub n_c: Option<usize>,
    #[arg(long)]
    pub samples_per_candidate: Option<usize>,
    #[arg(long)]
    pub val_envs: Option<usize>,
    #[arg(long)]
    pub test_envs: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub l_inst: Option<usize>,
    #[arg(long)]
    pub l_img: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Feed-forward width inside encoder layers.
    #[arg(long)]
    pub ff: Option<usize>,
    #[arg(long)]
    pub n_p_max: Option<usize>,
    /// Loss temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// full, no_cnpe, no_context or baseline.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// all, best_and_last or none.
    #[arg(long, default_value = "best_and_last")]
    pub checkpoints: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for report.json, report.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub env: String,
    #[arg(long)]
    pub instruction: String,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, env = "LTRPO_INDEX_DIR")]
    pub index_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, env = "LTRPO_INDEX_DIR")]
    pub index_dir: Option<PathBuf>,
    /// log or loopback.
    #[arg(long)]
    pub sink: Option<String>,
    /// JSON-lines file for the log sink.
    #[arg(long)]
    pub pick_log: Option<PathBuf>,
    /// Append-only JSON-lines copy of every selection event.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,ltrpo_service=info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
