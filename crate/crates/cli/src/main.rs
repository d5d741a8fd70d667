//! `ciw`: citation intent workbench.

mod backends;
mod commands;
mod config;
mod error;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ciw_core::dataset::RecordFormat;
use ciw_core::ensemble::MetaKind;
use ciw_core::lm::LmMode;

#[derive(Debug, Parser)]
#[command(name = "ciw", version, about = "Citation intent classification workbench")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory; `runs/<config digest>` when omitted.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// record, replay or passthrough.
    #[arg(long, global = true)]
    pub lm_mode: Option<LmMode>,
    /// Replay cache journal.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize a citation record file.
    Ingest(IngestArgs),
    /// Seeded train/validation split.
    Split(SplitArgs),
    /// Classify citations with one backend.
    Classify(ClassifyArgs),
    /// Search instructions and demonstration sets.
    Optimize(OptimizeArgs),
    /// Accuracy of every model at several demonstration counts.
    SweepShots(SweepArgs),
    /// Train or apply a meta-model over base predictions.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Score a prediction file against gold labels.
    Evaluate(EvaluateArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Summarize a run directory.
    ExportReport(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Instruction text.
    #[arg(long)]
    pub instruction: Option<String>,
    /// Built-in prompt: default, v000 or v001.
    #[arg(long)]
    pub prompt_version: Option<String>,
    /// Ask for the label only, without reasoning.
    #[arg(long)]
    pub no_cot: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// jsonl or json (a single array).
    #[arg(long)]
    pub format: Option<RecordFormat>,
    /// Keep records without a label and write `instances.jsonl`.
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stratify: bool,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Backend name.
    #[arg(long)]
    pub model: String,
    /// Records to classify; the run's val.jsonl by default.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Saved program (e.g. program.json from `optimize`).
    #[arg(long, conflicts_with_all = ["shots", "instruction", "prompt_version", "no_cot"])]
    pub program: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Demonstration pool; the run's train.jsonl by default.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file name inside the run directory.
    #[arg(long)]
    pub output: Option<String>,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Backend that writes instruction candidates; `--model` by default.
    #[arg(long)]
    pub proposer: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub instructions: Option<usize>,
    #[arg(long)]
    pub fewshot_sets: Option<usize>,
    #[arg(long)]
    pub max_demos: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub balanced: bool,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 5])]
    pub shots: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    #[arg(long)]
    pub kind: Option<MetaKind>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub shrinkage: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EnsembleCommand {
    /// Fit a meta-model.
    Train(Box<EnsembleTrainArgs>),
    /// Apply a saved meta-model.
    Predict(EnsemblePredictArgs),
}

#[derive(Debug, Args)]
pub struct EnsembleTrainArgs {
    /// Base predictions as NAME=PATH (or PATH, named after the file).
    #[arg(long = "predictions", num_args = 1.., conflicts_with = "base_models")]
    pub predictions: Vec<String>,
    /// Gold labels for the prediction rows; the run's val.jsonl by default.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Produce out-of-fold base predictions with these backends instead.
    #[arg(long, value_delimiter = ',')]
    pub base_models: Vec<String>,
    /// Labeled data for out-of-fold predictions; the run's train.jsonl by default.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Demonstrations per base program for out-of-fold predictions.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Tie-break order for majority voting; solo accuracy order by default.
    #[arg(long, value_delimiter = ',')]
    pub priority: Vec<String>,
    #[command(flatten)]
    pub meta: MetaArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct EnsemblePredictArgs {
    /// The run's meta_model.json by default.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long = "predictions", num_args = 1.., required = true)]
    pub predictions: Vec<String>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// The run's val.jsonl by default.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Fail when a gold example has no prediction.
    #[arg(long)]
    pub strict: bool,
    /// Suffix for the report files; the prediction file stem by default.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Holds instances.jsonl, optional suggestions.jsonl and the event log.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub consensus_threshold: usize,
    #[arg(long, default_value_t = 600)]
    pub lease_seconds: i64,
    #[arg(long, value_delimiter = ',')]
    pub adjudicators: Vec<String>,
    /// TOML table of annotator = "password".
    #[arg(long)]
    pub credentials: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output file name inside the run directory.
    #[arg(long, default_value = "report.md")]
    pub output: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(1)
        }
    }
}
