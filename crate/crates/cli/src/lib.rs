//! Command-line driver: configuration schema, subcommands and exit codes.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 missing prerequisite (dataset or checkpoint), 4 I/O or file
//! format failure.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand, ValueEnum};
use commands::{Baseline, CliError, CliResult, DataChoice};
use modclass::training::Phase;
use std::path::PathBuf;

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "MODCLASS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "modclass", version, about = "Modulation classification workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataArg {
    AwgnPo,
    Fading,
}

impl From<DataArg> for DataChoice {
    fn from(d: DataArg) -> Self {
        match d {
            DataArg::AwgnPo => DataChoice::AwgnPo,
            DataArg::Fading => DataChoice::Fading,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineArg {
    Ml,
    Hoc,
    CmaAblation,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the AWGN+PO and fading datasets (or one of them).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        data: Option<DataArg>,
    },
    /// Run one training phase, or all three in order.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Report accuracy and the confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum)]
        data: Option<DataArg>,
    },
    /// Run a classical baseline.
    Baseline {
        #[arg(value_enum)]
        which: BaselineArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        data: Option<DataArg>,
    },
    /// Write per-frame "re,im" point files before and after equalization.
    ExportConstellation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset frame indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        frames: Vec<usize>,
        #[arg(long, value_enum)]
        data: Option<DataArg>,
    },
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::GenData { config, data } => commands::gen_data(&commands::load_config(&config)?, data.map(Into::into)),
        Command::Train { config, phase } => {
            let cfg = commands::load_config(&config)?;
            let phases = match phase {
                PhaseArg::One => vec![Phase::P1],
                PhaseArg::Two => vec![Phase::P2],
                PhaseArg::Three => vec![Phase::P3],
                PhaseArg::All => vec![Phase::P1, Phase::P2, Phase::P3],
            };
            commands::train(&cfg, &phases)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            data,
        } => commands::eval(&commands::load_config(&config)?, &checkpoint, &split, data.map(Into::into)),
        Command::Baseline { which, config, data } => {
            let which = match which {
                BaselineArg::Ml => Baseline::Ml,
                BaselineArg::Hoc => Baseline::Hoc,
                BaselineArg::CmaAblation => Baseline::CmaAblation,
            };
            commands::baseline(&commands::load_config(&config)?, which, data.map(Into::into))
        }
        Command::ExportConstellation {
            config,
            checkpoint,
            frames,
            data,
        } => commands::export_constellation(&commands::load_config(&config)?, &checkpoint, &frames, data.map(Into::into)),
    }
}

/// Applies the thread-count override, if set.
pub fn configure_threads() -> Result<(), CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            modclass::parallel::set_thread_count(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}
