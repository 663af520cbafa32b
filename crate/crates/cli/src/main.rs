//! `canopy`: featurize audio, run VGGish-family networks, detect chainsaw
//! events and evaluate transfer heads.
//!
//! Exit codes: 0 success, 2 data or model errors, 64 usage errors.

mod commands;
mod inputs;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const EXIT_DATA: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "canopy", version, about = "Acoustic chainsaw detection with VGGish-family networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute log-mel spectrograms for WAV files.
    Featurize(FeaturizeArgs),
    /// Per-patch class probabilities as JSON lines.
    Infer(InferArgs),
    /// Per-second scoring merged into detection events (JSON lines).
    Detect(DetectArgs),
    /// Build an embedding cache from ESC-50-named clips.
    Embed(EmbedArgs),
    /// Train a classifier head on an embedding cache.
    TrainHead(TrainHeadArgs),
    /// k-fold cross-validation of a head on an embedding cache.
    EvalCv(EvalCvArgs),
    /// Describe a weight bundle or other container.
    Info(InfoArgs),
    /// Write a freshly initialized weight bundle.
    Init(InitArgs),
    /// Precision-recall curve from scored, labeled examples.
    Pr(PrArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecFormat {
    Bin,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    AugVggish,
    FcnVggish,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturizeArgs {
    /// WAV files or directories of WAV files.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SpecFormat::Bin)]
    pub format: SpecFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// WAV files, stored spectrograms, or directories of WAV files.
    pub inputs: Vec<PathBuf>,
    /// Patch hop in frames.
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(1..))]
    pub hop_frames: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5, value_parser = parse_probability)]
    pub threshold: f64,
    /// Longest run of sub-threshold seconds bridged inside one event.
    #[arg(long, default_value_t = 0)]
    pub gap: usize,
    #[arg(long, default_value_t = 1)]
    pub positive_class: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-second scores as `clip_id,second,probability` CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// Frozen backbone.
    #[arg(long)]
    pub model: PathBuf,
    /// ESC-50-named WAV files (`FOLD-SOURCE-TAKE-CLASS.wav`) or directories.
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(2..))]
    pub num_classes: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainOverrides {
    /// JSON training configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Graft the trained head onto this backbone instead of writing the
    /// head alone.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCvArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-fold CSV summary.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    #[arg(long, value_enum)]
    pub arch: Arch,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// All-zero weights with identity batch norm.
    #[arg(long)]
    pub zero: bool,
    /// Single sigmoid logit instead of a softmax (two classes only).
    #[arg(long)]
    pub sigmoid: bool,
    /// Divide every layer width by this factor (small test networks).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub width_divisor: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PrArgs {
    /// CSV of `probability,label` rows, label 0/1; a header row is skipped.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, default_value = "precision-recall")]
    pub title: String,
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<canopy_core::Error> for CliError {
    fn from(e: canopy_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version also arrive here, on stdout.
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Featurize(a) => commands::featurize(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::TrainHead(a) => commands::train_head(&a),
        Command::EvalCv(a) => commands::eval_cv(&a),
        Command::Info(a) => commands::info(&a),
        Command::Init(a) => commands::init(&a),
        Command::Pr(a) => commands::pr(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("canopy: {e}");
            ExitCode::from(e.code())
        }
    }
}
