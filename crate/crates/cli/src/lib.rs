//! Experiment runner for depthwise quantization.
//!
//! Each subcommand reads an [`ExperimentConfig`], writes the effective
//! configuration, CSV tables and a versioned `summary.json` to the output
//! directory, and maps failures to distinct exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod import;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use dq_core::format::Dtype;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, ImportError};
pub use import::import_tensors;

#[derive(Debug, Parser)]
#[command(name = "dq", version, about = "Depthwise quantization experiments")]
pub struct Cli {
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "dq-out")]
    pub out: PathBuf,
    /// Omit wall-clock fields so reruns produce identical files.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cost and capacity over a grid of code and book counts.
    Capacity,
    /// Fit depthwise quantizers to fixed features along each configured axis.
    Posthoc,
    /// Train the hierarchical autoencoder and save a checkpoint.
    Train,
    /// Code entropy, pairwise MI and level-zeroing analysis of a model.
    Analyze {
        /// Checkpoint directory written by `train`; trains afresh if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train over a grid of code and book counts and seeds.
    Ablate {
        /// Sweep points trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the synthetic data set as DQT1 files.
    Synth {
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Capacity => "capacity",
            Self::Posthoc => "posthoc",
            Self::Train => "train",
            Self::Analyze { .. } => "analyze",
            Self::Ablate { .. } => "ablate",
            Self::Synth { .. } => "synth",
        }
    }
}

/// Resolves the configuration: file (or defaults), then flag overrides.
pub fn effective_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = effective_config(cli.config.as_deref(), cli.seed)?;
    let out = report::Output::create(&cli.out, cli.reproducible)?;
    out.write_config(&cfg)?;
    match &cli.command {
        Command::Capacity => commands::capacity_cmd(&cfg, &out),
        Command::Posthoc => commands::posthoc_cmd(&cfg, &out),
        Command::Train => commands::train_cmd(&cfg, &out),
        Command::Analyze { checkpoint } => commands::analyze_cmd(&cfg, &out, checkpoint.as_deref()),
        Command::Ablate { jobs } => commands::ablate_cmd(&cfg, &out, *jobs),
        Command::Synth { dtype } => {
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            commands::synth_cmd(&cfg, &out, dtype)
        }
    }
}
