mod commands;
mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use diffdec_core::config::LpipsTarget;

#[derive(Parser)]
#[command(name = "diffdec", version, about = "Train, distill, sample and evaluate flow-matching image decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of PNG training images.
    #[arg(long)]
    data: PathBuf,
    /// Run directory; defaults to `runs/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train until this step; defaults to `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint directory (`ckpt/step_<n>`) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint whose weights start the fine-tuning stage.
    #[arg(long, required_unless_present = "resume")]
    parent: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LpipsChoice {
    Original,
    Teacher,
}

impl From<LpipsChoice> for LpipsTarget {
    fn from(c: LpipsChoice) -> Self {
        match c {
            LpipsChoice::Original => LpipsTarget::Original,
            LpipsChoice::Teacher => LpipsTarget::Teacher,
        }
    }
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the teacher's config when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    teacher_steps: usize,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    #[arg(long)]
    steps: Option<u64>,
    /// Perceptual loss reference.
    #[arg(long, value_enum, default_value_t = LpipsChoice::Original)]
    lpips_target: LpipsChoice,
    /// Load the teacher's EMA weights instead of the raw ones.
    #[arg(long)]
    ema: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latents written by `encode` (safetensors, tensor `z`).
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ema: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output latents file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ema: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference image directory.
    #[arg(long, requires = "candidate", conflicts_with_all = ["checkpoint", "data"])]
    reference: Option<PathBuf>,
    /// Reconstructed image directory, matched to the reference by sorted order.
    #[arg(long)]
    candidate: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation resolution for directory pairs.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    #[arg(long)]
    ema: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated step counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    steps: Vec<usize>,
    /// Comma-separated schedule exponents.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    rhos: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ema: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TradeoffArgs {
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    /// Model size preset (S, B, M, L, XL, H).
    #[arg(long, default_value = "S")]
    size: String,
    #[arg(long, default_value = "f8c4")]
    encoder: String,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
}

#[derive(Args)]
struct ToyDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and decoder jointly (or resume a run).
    Train(TrainArgs),
    /// Continue training a checkpoint with the encoder frozen.
    Finetune(FinetuneArgs),
    /// Distill a multi-step teacher into a single-step student.
    Distill(DistillArgs),
    /// Decode latents to PNG images.
    Sample(SampleArgs),
    /// Encode a PNG directory to posterior-mean latents.
    Encode(EncodeArgs),
    /// Compute reconstruction metrics and write a JSON report.
    Eval(EvalArgs),
    /// Evaluate a grid of step counts and schedule exponents into a CSV.
    Sweep(SweepArgs),
    /// Run the 1D distortion versus distribution-shift example.
    DemoTradeoff(TradeoffArgs),
    /// Print decoder parameter counts per component.
    Describe(DescribeArgs),
    /// Write a synthetic PNG corpus.
    ToyData(ToyDataArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Distill(a) => commands::distill(a),
        Command::Sample(a) => commands::sample(a),
        Command::Encode(a) => commands::encode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::DemoTradeoff(a) => commands::demo_tradeoff(a),
        Command::Describe(a) => commands::describe(a),
        Command::ToyData(a) => commands::toy_data(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
