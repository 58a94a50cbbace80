//! `cag` command line: build token layouts, run or stub instruction
//! grounding, compile and expand attention masks, run the attention
//! self-checks, and drive the toy experiments.
//!
//! Exit codes: 0 success, 2 input error, 3 backend/transport error,
//! 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cag_core::grounding::GroundingError;
use cag_core::toy::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Parser)]
#[command(name = "cag", version, about = "Multi-stream conditioning toolkit")]
pub struct Cli {
    /// TOML config file (dropout, guidance, sampler, vlm endpoint).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override for seeded commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; artifacts are written here when given.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Format for the report printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Token layout operations.
    Layout {
        #[command(subcommand)]
        cmd: commands::LayoutCmd,
    },
    /// Instruction-reference alignment.
    Ground {
        #[command(subcommand)]
        cmd: commands::GroundCmd,
    },
    /// Attention-mask compilation and expansion.
    Mask {
        #[command(subcommand)]
        cmd: commands::MaskCmd,
    },
    /// Numeric self-checks for the attention kernels.
    Attend {
        #[command(subcommand)]
        cmd: commands::AttendCmd,
    },
    /// Toy dataset generation, training, and the dropout sweep.
    Toy {
        #[command(subcommand)]
        cmd: commands::ToyCmd,
    },
    /// Attention-map export.
    Viz {
        #[command(subcommand)]
        cmd: commands::VizCmd,
    },
}

/// Maps an error chain to the documented exit codes.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(g) = cause.downcast_ref::<GroundingError>() {
            return match g {
                GroundingError::Transport(_) | GroundingError::Http { .. } => 3,
                _ => 2,
            };
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return match h {
                HarnessError::NanLoss { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<commands::NumericCheckFailed>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
