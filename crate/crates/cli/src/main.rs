//! `clic`: command-line front end for the contrastive image-complexity
//! toolkit.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "clic", version, about = "Contrastive image-complexity toolkit")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, env = "CLIC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a labeled synthetic corpus (PNGs plus manifest.jsonl).
    Synth(SynthArgs),
    /// Score every image in a manifest.
    Score(ScoreArgs),
    /// Expand a dataset with random crop-and-mix samples.
    Expand(ExpandArgs),
    /// Contrastive pre-training of the encoder.
    Train(TrainArgs),
    /// Fit a regression head on a frozen encoder.
    Finetune(FinetuneArgs),
    /// PCC/SRCC of a scorer against manifest labels.
    Eval(EvalArgs),
    /// Complexity distribution: histogram and normal fit.
    Icd(IcdArgs),
    /// Split a scored manifest into low/mid/high complexity subsets.
    Stratify(StratifyArgs),
    /// Head quality as a function of labeled sample count.
    Fewshot(FewshotArgs),
    /// Fuse two feature-map blobs.
    FuseDemo(FuseArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Side length of each square image.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Scorer selection shared by score, eval, icd and stratify.
#[derive(Args, Debug, Serialize)]
pub struct ScorerArgs {
    /// entropy, edge, compress or clic.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Encoder checkpoint, required by the clic scorer.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Regression head written by `finetune`, required by the clic scorer.
    #[arg(long)]
    pub head: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Scored JSON-lines output; a summary goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ExpandArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub c: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// List the source images in the output manifest too.
    #[arg(long)]
    pub keep_originals: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyViewArg {
    Full,
    Rcm,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueInitArg {
    Random,
    Keys,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Fractions of the run at which the learning rate drops.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8")]
    pub lr_drop_points: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_drop_factor: f64,
    /// Key-encoder EMA coefficient.
    #[arg(long, default_value_t = 0.999)]
    pub momentum_m: f64,
    #[arg(long, default_value_t = 0.2)]
    pub temperature: f64,
    #[arg(long, default_value_t = 4096)]
    pub queue_size: usize,
    #[arg(long, default_value_t = 2)]
    pub c: usize,
    #[arg(long, default_value_t = 0.9)]
    pub sgd_momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = KeyViewArg::Full)]
    pub key_view: KeyViewArg,
    #[arg(long, value_enum, default_value_t = QueueInitArg::Keys)]
    pub queue_init: QueueInitArg,
}

/// Head optimizer settings shared by finetune and fewshot.
#[derive(Args, Debug, Serialize)]
pub struct HeadArgs {
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.001)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    /// Manifest whose entries all carry a score label.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Output head file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct IcdArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score first; without it the manifest's own scores are used.
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct StratifyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 0.7, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FewshotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Training-set sizes, ascending.
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200")]
    pub ns: Vec<usize>,
    /// Held-out evaluation items.
    #[arg(long, default_value_t = 100)]
    pub eval_size: usize,
    #[command(flatten)]
    pub head: HeadArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FuseArgs {
    /// Host feature-map blob.
    #[arg(long)]
    pub task: PathBuf,
    /// Complexity feature-map blob.
    #[arg(long)]
    pub ic: PathBuf,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub weight: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads(jobs: Option<usize>) -> Result<(), commands::CliError> {
    let Some(jobs) = jobs else { return Ok(()) };
    if jobs == 0 {
        return Err(commands::CliError::usage("--jobs must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| commands::CliError::runtime(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    log::info!("built without parallel support; --jobs {jobs} ignored");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = init_threads(cli.jobs).and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
