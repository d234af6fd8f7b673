//! Command-line front end: configuration, dataset and checkpoint files, and
//! CSV artifacts around the `gdc-core` engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gdc", version, about = "Graph DropConnect training and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, replacing `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run a single seed instead of `[train] seeds`.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured seed and write summaries and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Validation and test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Monte Carlo predictive entropy and PAvPU of a checkpoint.
    Uq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of stochastic forward passes.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Total variation of hidden outputs, tracked during training or for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per entry of `[model] block_sweep`.
    SweepBlocks {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, samples: Option<usize>) -> Result<RunConfig, CliError> {
    if !common.config.exists() {
        return Err(CliError::Config(format!("config file {} does not exist", common.config.display())));
    }
    let mut cfg = RunConfig::load(&common.config)?;
    commands::Overrides { out: common.out.clone(), seed: common.seed_override, samples }.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { common } => commands::cmd_train(&load(common, None)?),
        Command::Eval { common, checkpoint } => commands::cmd_eval(&load(common, None)?, checkpoint).map(|_| ()),
        Command::Uq { common, checkpoint, samples } => {
            commands::cmd_uq(&load(common, *samples)?, checkpoint).map(|_| ())
        }
        Command::Diagnose { common, checkpoint } => {
            commands::cmd_diagnose(&load(common, None)?, checkpoint.as_deref())
        }
        Command::SweepBlocks { common } => commands::cmd_sweep_blocks(&load(common, None)?).map(|_| ()),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 3 on training divergence, 2 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
