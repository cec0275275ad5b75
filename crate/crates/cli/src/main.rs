mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, config values or inputs; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "gunc",
    version,
    about = "Density-map object counting with U-Net and gated U-Net models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of disks with dot annotations
    GenData(GenDataArgs),
    /// Train a counter and write checkpoints, trace and resolved config
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Predict density maps and counts for individual images
    Predict(PredictArgs),
    /// Report mean gate activations over a dataset split
    InspectGates(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    /// Objects per image, inclusive range such as 3..8
    #[arg(long, default_value = "3..8")]
    pub count: String,
    /// Disk radius range in pixels
    #[arg(long, default_value = "3..6")]
    pub radius: String,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    /// flat, stripes or noise
    #[arg(long, default_value = "noise")]
    pub background: String,
    /// Images assigned to the val split
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Images assigned to the test split
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Falls back to GUNC_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat dotted-key JSON; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total iterations, counted from the start of the run
    #[arg(long, alias = "iterations")]
    pub iters: Option<u64>,
    /// Falls back to the config file, then GUNC_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gate the skip connections (GU-Net); `--gated false` trains a U-Net
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gated: Option<bool>,
    /// concat, sum or mul
    #[arg(long)]
    pub fusion: Option<String>,
    /// Five comma-separated encoder widths
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Encoder widths 8,16,32,64,128
    #[arg(long, conflicts_with = "channels")]
    pub narrow: bool,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub l2: Option<f64>,
    /// mean, sum or norm
    #[arg(long)]
    pub loss: Option<String>,
    /// Kernel width or preset: trancos, shanghai, ucsd
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Random gamma augmentation
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gamma: Option<bool>,
    /// f32 or f64
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub max_side: Option<usize>,
    /// Continue from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overwrite an existing run directory
    #[arg(long)]
    pub force: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle_gt")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub game_max: u32,
    /// sum or averaged
    #[arg(long, default_value = "sum")]
    pub convention: String,
    /// Score the ground truth against itself
    #[arg(long)]
    pub oracle_gt: bool,
    /// Keep per-region error grids in the JSON report
    #[arg(long)]
    pub grids: bool,
    /// Report directory; defaults to the checkpoint's directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report directory; defaults to the checkpoint's directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Joins the error and its causes, skipping causes whose text the message
/// before them already ends with.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::InspectGates(args) => commands::inspect_gates(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 1 } else { 2 })
        }
    }
}
