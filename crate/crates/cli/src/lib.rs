//! Command-line orchestration for the uiekit pipeline.
//!
//! Every stage reads and writes JSONL behind a header that embeds the fully
//! resolved configuration, so any artifact can be traced back to the settings
//! that produced it.

pub mod commands;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "uiekit", version, about = "Reasoning-augmented information extraction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline config (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed for every sampling stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scripted mock gateway responses instead of a live endpoint.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    /// Directory for cached gateway responses.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Output file, or output directory for multi-file stages.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Schema utilities.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Convert, validate and deduplicate a raw corpus.
    Curate(CurateArgs),
    /// Build the multi-strategy reasoning dataset.
    BuildReasoning(BuildReasoningArgs),
    /// Render SFT samples from SFT-routed instances.
    RenderSft(RenderSftArgs),
    /// Split reasoning instances into SFT and RL files by level.
    Route(RouteArgs),
    /// Reward scoring.
    #[command(subcommand)]
    Reward(RewardCommand),
    /// Group-relative alignment utilities.
    #[command(subcommand)]
    Grpo(GrpoCommand),
    /// Micro-F1 of predictions against gold.
    Score(ScoreArgs),
    /// Merge score reports and pipeline statistics into one summary.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Compile a raw schema into the unified representation.
    Compile(SchemaCompileArgs),
}

#[derive(Debug, Args)]
pub struct SchemaCompileArgs {
    /// Raw schema JSON file.
    #[arg(long)]
    pub input: PathBuf,
    /// ner, re or ee.
    #[arg(long)]
    pub task: String,
    /// Source dataset name recorded in the schema.
    #[arg(long, default_value = "")]
    pub source: String,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Source adapter (unified or iepile).
    #[arg(long)]
    pub adapter: Option<String>,
    /// Subsample empty-gold records, keeping each with this probability
    /// (the configured `negative_keep` when no value is given).
    #[arg(long)]
    pub keep_negatives: Option<Option<f64>>,
}

#[derive(Debug, Args)]
pub struct BuildReasoningArgs {
    /// Curated corpus JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderSftArgs {
    /// Reasoning dataset JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// Share of samples cloned with hidden reasoning.
    #[arg(long)]
    pub hide_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Minimum level for the SFT route.
    #[arg(long)]
    pub min_level: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum RewardCommand {
    /// Serve POST /reward and /reward/batch over HTTP.
    Serve(ServeArgs),
    /// Score a JSONL file of reward requests.
    Score(RewardScoreArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct RewardScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum GrpoCommand {
    /// Run the alignment loop against a policy and export batches.
    Sim(GrpoSimArgs),
}

#[derive(Debug, Args)]
pub struct GrpoSimArgs {
    /// RL pool: corpus or reasoning JSONL.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// `bandit` (offline mock) or `gateway`.
    #[arg(long, default_value = "bandit")]
    pub policy: String,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Predictions JSONL: `id` plus `records`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold JSONL: corpus or reasoning records.
    #[arg(long)]
    pub gold: PathBuf,
    /// Restrict to one task; all tasks when absent.
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files from `score`.
    #[arg(long = "reports", num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Reasoning dataset, for the level histogram.
    #[arg(long)]
    pub reasoning: Option<PathBuf>,
    /// Dynamics log from `grpo sim`.
    #[arg(long)]
    pub dynamics: Option<PathBuf>,
}

pub use commands::run;
