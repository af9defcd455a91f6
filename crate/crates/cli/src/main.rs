//! `quadgate` command-line driver.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

impl Fail {
    pub const USAGE: u8 = 2;
    pub const NUMERICAL: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: Self::NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<quadgate::Error> for Fail {
    fn from(e: quadgate::Error) -> Self {
        match e {
            quadgate::Error::NonFinite(_) => Self::numerical(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "quadgate", version, about = "Quadrant-gated pyramid transformer for severity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (P5 images plus scores.csv).
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints; several also get an ensemble row.
    Eval(EvalArgs),
    /// Finite-difference check of every operation and every model parameter.
    Gradcheck(GradcheckArgs),
    /// Write TransMix examples and a report of their mixed scores.
    Mixdemo(MixdemoArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    /// ge, lo or cip
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with images and scores.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate test dataset; otherwise `test_fraction` of `--data` is held out.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_transmix: bool,
    /// 2, 4 or 6
    #[arg(long)]
    pub regions: Option<usize>,
    /// vit, pvt or gap
    #[arg(long)]
    pub aggregator: Option<String>,
    #[arg(long)]
    pub modality: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV path (default: checkpoint path with `.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the modality recorded in the first checkpoint.
    #[arg(long)]
    pub modality: Option<String>,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Corrupt one backward rule (gelu, sigmoid or softmax).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct MixdemoArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub modality: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Mixdemo(a) => commands::mixdemo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
