mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, unreadable inputs, or invalid configuration: exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "biowriter", version, about = "Retrieval-augmented biography writer")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus as JSONL.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint with a fresh optimizer.
    Finetune(FinetuneArgs),
    /// Write articles with a trained checkpoint.
    Generate(GenerateArgs),
    /// Generate for a corpus and score against its gold articles.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a grid of query modes and granularities over seeds.
    Ablate(AblateArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 120)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    pub distractors: Switch,
    /// Keep each planted fact in the evidence with this probability.
    #[arg(long, default_value_t = 1.0)]
    pub evidence_rate: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub wikipedia_mirror: Switch,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Switch {
    On,
    Off,
}

/// Flags shared by every command that resolves a run configuration.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat JSON config file (a run manifest is also accepted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// desk or full
    #[arg(long)]
    pub scale: Option<String>,
    /// Reject corpus records with unknown fields.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_updates: Option<usize>,
    #[arg(long)]
    pub query_mode: Option<String>,
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub frozen_retrieval: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Checkpoint to start from.
    #[arg(long = "from")]
    pub from: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_sections: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "name")]
    pub corpus: Option<PathBuf>,
    /// Write one article for this subject, without evidence.
    #[arg(long, requires = "occupation")]
    pub name: Option<String>,
    #[arg(long)]
    pub occupation: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated: rouge, equivalence, coverage, concentration, or all.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out corpus to score on.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, default_value = "name_only,name_occupation,full")]
    pub modes: String,
    #[arg(long, default_value = "section_by_section")]
    pub granularities: String,
    #[arg(long, default_value = "1,2,3,4,5")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Also write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use biowriter::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parse { .. }
                | E::InvalidBiography { .. }
                | E::EmptyCorpus
                | E::Config(_)
                | E::InvalidInput(_)
                | E::VocabMismatch(_)
                | E::Checkpoint(_)
                | E::MissingVariant(_) => 2,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
