//! Command-line front end: train, eval, audit, ablate, gen-data, gradcheck.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] alignconv::Error),
    #[error("audit failed: {0}")]
    AuditFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::AuditFailed(_) => 2,
            CliError::Core(alignconv::Error::Config(_)) => 3,
            CliError::Core(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "alignconv", version, about = "Rotation-invariant point convolution with aligned local frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; every key can also be given as a flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv, best.ckpt and last.ckpt.
    Train(Common),
    /// Evaluate a checkpoint on the test set under a rotation scenario.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-time rotation: n, z or so3.
        #[arg(long, default_value = "n")]
        scenario: String,
    },
    /// Run the invariance, equivariance, oracle and gradient audits.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Audit this model instead of a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every listed variant (and the ω sweep) on the same data and seed.
    Ablate(Common),
    /// Write the synthetic dataset as XYZ files with manifests.
    GenData(Common),
    /// Finite-difference check of every parameter of a two-block network.
    Gradcheck(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.overrides);
    match &cli.command {
        Command::Train(c) => commands::train_cmd(&load(c)?),
        Command::Eval {
            common,
            checkpoint,
            scenario,
        } => commands::eval_cmd(&load(common)?, checkpoint, scenario),
        Command::Audit { common, checkpoint } => commands::audit_cmd(&load(common)?, checkpoint.as_deref()),
        Command::Ablate(c) => commands::ablate_cmd(&load(c)?),
        Command::GenData(c) => commands::gen_data_cmd(&load(c)?),
        Command::Gradcheck(c) => commands::gradcheck_cmd(&load(c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
