//! The `esnv` command line: dataset building, two-stage training,
//! evaluation, comparison reports and one-off inference.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::ConfigFile;
pub use manifest::{sha256_file, RunManifest, MANIFEST_FILE};

/// File names inside a dataset directory.
pub mod files {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const TRAIN: &str = "train.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const SPLIT: &str = "split.json";
    pub const VOCAB: &str = "vocab.txt";
    pub const CHECKPOINT: &str = "checkpoint.esnv";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const TABLE_TXT: &str = "table.txt";
    pub const TABLE_CSV: &str = "table.csv";
}

#[derive(Debug, Parser)]
#[command(name = "esnv", version, about = "Two-stage SFT + DPO navigation-dialogue pipeline")]
pub struct Cli {
    /// key = value settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "ESNV_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus preparation.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Stage I (sft) or stage II (dpo) training.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Comparison table over reports and ingested baselines.
    Report(ReportArgs),
    /// Answer questions about one image.
    Infer(InferArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Validate or synthesize a corpus, split it and derive preference pairs
    Build(BuildArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Generate the synthetic fixture corpus.
    #[arg(long, conflicts_with = "data")]
    pub fixtures: bool,
    /// Existing corpus (JSONL) to validate and split.
    #[arg(long, required_unless_present = "fixtures")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainStage {
    /// Masked supervised fine-tuning (projector-only by default)
    Sft(TrainArgs),
    /// Preference optimization of the LoRA adapters from a stage-I checkpoint
    Dpo(TrainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `dataset build`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint (required for dpo).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated components: projector, lora, vision, lm.
    #[arg(long)]
    pub trainable: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// DPO extension: advantages relative to the incoming model.
    #[arg(long)]
    pub reference_mode: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "echo")]
    pub init: Option<PathBuf>,
    /// Score the references themselves (oracle row).
    #[arg(long)]
    pub echo: bool,
    /// model | hash
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files or baseline response sets.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Dataset directory whose test split scores the baselines.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint for the model provider when scoring baselines.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub init: PathBuf,
    /// Vocabulary file, or a dataset directory containing one.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Asked in order, each answer joining the history.
    #[arg(long, required = true)]
    pub question: Vec<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

/// Maps an error chain to the exit-code contract.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<crate::Error>().is_some_and(crate::Error::is_numeric));
    if numeric {
        2
    } else {
        1
    }
}

/// Runs one command; output lines go to `out`.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    commands::dispatch(cli, out)
}

/// Parses `args` and runs, printing errors to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
