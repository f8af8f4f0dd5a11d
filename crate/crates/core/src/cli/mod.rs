//! The `qdst` command line.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 data
//! problems (unreadable or malformed inputs, missing documents), 4 numerical
//! failure during training or scoring.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::QdstError;
use crate::tensor::Precision;
pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// Wraps an error raised while reading inputs.
    pub(crate) fn data(e: QdstError) -> Self {
        match e {
            QdstError::NumericalError(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<QdstError> for CliError {
    fn from(e: QdstError) -> Self {
        match e {
            QdstError::InvalidInput(m) => CliError::Config(m),
            QdstError::NumericalError(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qdst", version, about = "Query-directed sparse transformer reranker")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: qdst-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for attention heads.
    #[arg(long, global = true, env = "QDST_THREADS")]
    pub threads: Option<usize>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump an attention pattern for a synthetic layout of length n.
    Pattern(PatternArgs),
    /// Train a reranker.
    Train(TrainArgs),
    /// Rerank candidate lists and write a TREC run.
    Rerank(RerankArgs),
    /// Evaluate a TREC run against qrels.
    Eval(EvalArgs),
    /// Time forward and forward+backward passes across presets and lengths.
    Bench(BenchArgs),
    /// Attention statistics of a model over a dataset.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct PatternArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub query_len: usize,
    #[arg(long, default_value_t = 25)]
    pub sentence_len: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding corpus.tsv (or corpus.jsonl), queries.tsv, qrels.txt, candidates.run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// pointwise or pairwise
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary file (default: vocab.json next to the model).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "qdst")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// ndcg@k, mrr@k, map or err@k
    #[arg(long)]
    pub metric: Option<String>,
    /// exp or linear
    #[arg(long)]
    pub gain: Option<String>,
    #[arg(long)]
    pub threshold: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated presets.
    #[arg(long, value_delimiter = ',')]
    pub presets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Run cells concurrently (smoke runs only).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained model; a freshly initialised one is used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Layer (1-based) for top-sentence extraction; default the last.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub max_queries: usize,
    #[arg(long, default_value_t = 3)]
    pub docs_per_query: usize,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub resolved_config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub version: &'static str,
}

pub(crate) fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub(crate) struct Context {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub precision: Precision,
    pub threads: usize,
    pub args: Vec<String>,
    pub started: u128,
}

impl Context {
    pub fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", self.out.display())))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_manifest(&self, command: &str) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: command.into(),
            args: self.args.clone(),
            config_path: self.config_path.clone(),
            resolved_config: self.config.clone(),
            seed: self.config.seed(),
            out_dir: self.out.clone(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            version: env!("CARGO_PKG_VERSION"),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_file(&self.path("manifest.json"), json)
    }
}

pub(crate) fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn context(cli: &Cli, args: Vec<String>) -> Result<Context, CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if cli.precision.is_some() {
        config.precision = cli.precision;
    }
    config.resolve();
    config.validate()?;
    Ok(Context {
        precision: config.precision.unwrap_or_default(),
        threads: config.threads.unwrap_or(1),
        config,
        config_path: cli.config.clone(),
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("qdst-out")),
        args,
        started: now_ms(),
    })
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let printable = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = context(&cli, printable).and_then(|mut ctx| commands::dispatch(&cli.command, &mut ctx));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qdst: {e}");
            e.exit_code()
        }
    }
}
