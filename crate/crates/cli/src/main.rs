//! `vlmlab`: drivers for the geometry, substitution, truncation, decoding,
//! distillation, cost and reasoning-chain experiments.
//!
//! Exit codes: `0` success, `2` usage, `3` missing input, `4` invalid
//! configuration or arguments, `5` malformed input data, `6` failed
//! computation, `7` output failure.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlmlab_core::LabError;

#[derive(Parser, Debug)]
#[command(name = "vlmlab", version, about = "Layer-wise geometry and visual-depth experiments on a toy vision-language decoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "vlmlab-out")]
    pub out: PathBuf,
    /// Seed for datasets, sampling and adapter initialisation.
    #[arg(long, global = true, env = "VLMLAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; `1` runs every sweep sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct Workload {
    /// Model configuration (`.json`) or checkpoint (`.tvlm`).
    #[arg(long)]
    pub model: PathBuf,
    /// Task family: mcq, vqa, caption or chain.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of synthetic samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Generation budget per prompt.
    #[arg(long)]
    pub max_new: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer entropy, effective rank, intrinsic dimension and curvature.
    Geometry {
        /// Model configuration or checkpoint.
        #[arg(long, required_unless_present = "trace", conflicts_with = "trace")]
        model: Option<PathBuf>,
        /// `HSD1` hidden-state trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "caption")]
        task: String,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Also write the first sample's states as `trace.hsd`.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Cross-layer substitution grid and gap curves.
    Substitute {
        #[command(flatten)]
        w: Workload,
        /// Similarity metric against the base output.
        #[arg(long, default_value = "ss")]
        metric: String,
        /// Resume layer: deeper or receiver.
        #[arg(long, default_value = "deeper")]
        policy: String,
    },
    /// Image-token truncation sweep.
    Truncate {
        #[command(flatten)]
        w: Workload,
        /// Cut layers: `all`, `a..b`, `a..=b` or a comma list; `L` is the depth.
        #[arg(long, default_value = "all")]
        cuts: String,
        /// Metrics: em, ia, ss, bleu, rouge1, rouge2, rougeL, rouge.
        #[arg(long)]
        metrics: Option<String>,
        /// Score against `gold` task answers or the `base` model's outputs.
        #[arg(long, default_value = "gold")]
        against: String,
    },
    /// Decoding strategies across cut layers, with cross-strategy CV.
    DecodeSweep {
        #[command(flatten)]
        w: Workload,
        #[arg(long, default_value = "greedy,beam,nucleus,topk,temp")]
        strategies: String,
        #[arg(long, default_value = "all")]
        cuts: String,
        #[arg(long, default_value = "ss")]
        metric: String,
    },
    /// Adapter distillation per cut and the recovery curve.
    Distill {
        #[command(flatten)]
        w: Workload,
        #[arg(long, default_value = "all")]
        cuts: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 8.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Held-out evaluation prompts.
        #[arg(long, default_value_t = 8)]
        eval_samples: usize,
        #[arg(long, default_value = "ss")]
        metric: String,
        /// Loss: hard (teacher tokens) or soft (teacher distributions).
        #[arg(long, default_value = "hard")]
        objective: String,
    },
    /// Analytic prefill/decode cost per cut and the accuracy/cost frontier.
    Flops {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "all")]
        cuts: String,
        /// Decode steps after the prompt.
        #[arg(long, default_value_t = 16)]
        decode_steps: usize,
        /// Text prompt length; defaults to the task prompt's length.
        #[arg(long)]
        text_tokens: Option<usize>,
        #[arg(long, default_value = "caption")]
        task: String,
        /// Include adapter cost at this rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Scores to join: a depth, sweep or recovery CSV.
        #[arg(long)]
        with_scores: Option<PathBuf>,
    },
    /// Per-component reasoning-chain scores across cut layers.
    ChainEval {
        #[command(flatten)]
        w: Workload,
        #[arg(long, default_value = "all")]
        cuts: String,
    },
    /// Toy next-token pre-training on the synthetic tasks.
    Pretrain {
        /// Model configuration (`.json`) or checkpoint to continue.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        /// Examples per task family.
        #[arg(long, default_value_t = 32)]
        per_task: usize,
    },
    /// Summarise completed run directories into one JSON file.
    Bundle {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// A failed invocation and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    MissingInput(PathBuf),
    Lab(LabError),
    Output(LabError),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Lab(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::MissingInput(_) => 3,
            Failure::Output(_) => 7,
            Failure::Lab(e) => match e {
                LabError::Config(_) | LabError::Argument(_) => 4,
                LabError::Format(_)
                | LabError::UnsupportedVersion { .. }
                | LabError::Truncated(_)
                | LabError::Data(_)
                | LabError::Tokenizer(_)
                | LabError::Length { .. }
                | LabError::Vocab { .. }
                | LabError::Io { .. } => 5,
                _ => 6,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::MissingInput(p) => format!("input not found: {}", p.display()),
            Failure::Lab(e) | Failure::Output(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("vlmlab: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
