//! `baunet`: synthetic data, training, Monte Carlo inference, degradations
//! and evaluation from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "baunet", version, about = "Bayesian attention U-Net with Monte Carlo uncertainty maps")]
struct Cli {
    /// Root seed, copied into the data, training and inference seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives every output of the command.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// JSON config, or a `resolved_config.json` from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override such as `train.epochs=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DegradeKind {
    Clean,
    Blur,
    Rician,
    BrightnessContrast,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize, Subcommand)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic lesion dataset and split it.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Monte Carlo segmentation and uncertainty maps for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Number of stochastic passes.
        #[arg(long = "T")]
        passes: Option<usize>,
    },
    /// Apply one corruption to an image.
    Degrade {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        kind: DegradeKind,
        #[arg(long, allow_negative_numbers = true)]
        sigma: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        delta: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        gain: Option<f64>,
    },
    /// Uncertainty and accuracy under a list of corruptions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON array of corruption specs.
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Spread of the uncertainty estimates as a function of T.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "T-values", value_delimiter = ',')]
        t_values: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Degrade { .. } => "degrade",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Settings shared by every command after resolution.
pub struct Context {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub force: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    commands::apply_flags(&mut config, &cli.command);
    config.apply_overrides(&cli.overrides)?;
    let mut ctx = Context {
        config,
        output_dir: cli.output_dir,
        force: cli.force,
    };
    commands::dispatch(&mut ctx, &cli.command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
