//! `gaussianize`: train, evaluate, sample, and diagnose invertible
//! density models from the command line.

use clap::{Parser, Subcommand};
use std::process::ExitCode;

mod commands;
mod config;

use commands::{
    cmd_eval, cmd_gradcheck, cmd_rbig, cmd_report, cmd_sample, cmd_toygen, cmd_train, EvalArgs,
    GradcheckArgs, RbigArgs, ReportArgs, SampleArgs, ToygenArgs, TrainArgs,
};

/// A command failure with its process exit code: 1 config, 2 data,
/// 3 numerical, 4 checkpoint.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(1, message)
    }
}

#[derive(Parser)]
#[command(
    name = "gaussianize",
    version,
    about = "Invertible density estimation by iterative Gaussianization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a flow and write checkpoint + metrics into a run directory.
    Train(TrainArgs),
    /// Mean NLL of a checkpoint on a dataset (plus bpd when dequantized).
    Eval(EvalArgs),
    /// Draw samples from a flow checkpoint into a CSV.
    Sample(SampleArgs),
    /// Fit the frozen iterative-Gaussianization baseline.
    Rbig(RbigArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Gaussianity diagnostics of transformed data, as JSON.
    Report(ReportArgs),
    /// Generate a toy dataset CSV with its manifest.
    Toygen(ToygenArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are config errors (exit 1); --help and
            // --version exit cleanly.
            let failed = e.use_stderr();
            let _ = e.print();
            return if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sample(args) => cmd_sample(args),
        Cmd::Rbig(args) => cmd_rbig(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Toygen(args) => cmd_toygen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
