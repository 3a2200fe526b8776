//! Command-line pipeline: generate → train → predict → evaluate, plus export.

pub mod commands;
pub mod error;
pub mod manifest;

pub use error::CliError;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fst_core::config::ExperimentConfig;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "fst", version = manifest::VERSION, about = "Spectral PDE trajectories and transformer forecasts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    Physics,
}

impl LossArg {
    fn as_str(self) -> &'static str {
        match self {
            LossArg::Mse => "mse",
            LossArg::Physics => "physics",
        }
    }
}

/// Flags shared by every subcommand; each overrides one config field.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML experiment configuration; omitted fields take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for both parameter initialization and batch shuffling.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Number of samples to forecast.
    #[arg(long, value_name = "INT")]
    pub horizon: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// `true` drops the residual connections inside attention blocks.
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub strict_paper_arch: Option<bool>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured solver and store the sampled trajectory.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a forecaster on the training interval of a trajectory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Defaults to `<out>/trajectory.fsta`.
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
    },
    /// Closed-loop forecast from the end of the training interval.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Defaults to `<out>/checkpoint_<loss>.fsta`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/trajectory.fsta`.
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
    },
    /// Compare predictions with a reference, or the solver with Taylor–Green.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Prediction files; defaults to every `<out>/prediction_*.fsta`.
        #[arg(long = "pred", value_name = "PATH")]
        preds: Vec<PathBuf>,
        /// Defaults to `<out>/trajectory.fsta`.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
        /// Check the NS solver against the analytic Taylor–Green vortex.
        #[arg(long)]
        taylor_green: bool,
    },
    /// Write physical-space fields of a trajectory container as CSV.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Comma-separated sample times; defaults to the last sample.
        #[arg(long, value_delimiter = ',', value_name = "T")]
        times: Vec<f64>,
    },
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("i/o error on {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        cfg.seeds.init = seed;
        cfg.seeds.shuffle = seed;
    }
    if let Some(loss) = args.loss {
        cfg.training.loss = loss.as_str().into();
    }
    if let Some(strict) = args.strict_paper_arch {
        cfg.model.residual = !strict;
    }
    if let Some(h) = args.horizon {
        if h == 0 {
            return Err(CliError::Config("--horizon: must be at least 1".into()));
        }
        cfg.forecast.horizon = h;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => commands::generate(&resolve_config(&common)?),
        Command::Train { common, trajectory } => commands::train(&resolve_config(&common)?, trajectory),
        Command::Predict {
            common,
            checkpoint,
            trajectory,
        } => commands::predict(&resolve_config(&common)?, checkpoint, trajectory),
        Command::Evaluate {
            common,
            preds,
            reference,
            taylor_green,
        } => {
            let cfg = resolve_config(&common)?;
            if taylor_green {
                commands::evaluate_taylor_green(&cfg)
            } else {
                commands::evaluate(&cfg, preds, reference)
            }
        }
        Command::Export { common, input, times } => commands::export(&resolve_config(&common)?, &input, &times),
    }
}
