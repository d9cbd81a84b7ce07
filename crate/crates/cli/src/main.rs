//! Command-line pipeline: dataset generation, classifier pretraining,
//! adversarial training, ablation, synthesis, evaluation and the gradient
//! verification suite.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, config or
//! missing files), 2 runtime failure.

mod meta;
mod ops;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "cfsynth", version, about = "Counterfactual phantom synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flag values win over the config file.
#[derive(Debug, Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the activity classifier and freeze the best checkpoint.
    PretrainClf {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarial training of generator and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the counterfactual reconstruction weight.
        #[arg(long)]
        lambda_vox_minus: Option<f64>,
        /// Resume from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the full and vox-minus-ablated arms and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Override the full arm's counterfactual reconstruction weight.
        #[arg(long)]
        lambda_vox_minus: Option<f64>,
    },
    /// Emit reconstruction, counterfactual and difference map per subject.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subject ids; defaults to all active test
        /// subjects.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
    /// Evaluate a trained generator on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Failures mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is a
            // validation failure.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match ops::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
