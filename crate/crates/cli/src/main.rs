use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Progressive three-stage image deraining: verification, toy training,
/// inference, metrics and ablations.
#[derive(Parser, Debug)]
#[command(name = "prism", version, about)]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by every command.
#[derive(Args, Debug)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, default_value = "info", global = true)]
    pub log: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Runs verification suites and prints the coverage checklist.
    Verify {
        /// Suite name or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Runs the named primitive's gradient check with a wrong backward rule.
        #[arg(long, value_name = "PRIMITIVE")]
        corrupt_backward: Option<String>,
    },
    /// Writes a synthetic paired rain dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Side length of the square images.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Trains on a manifest and writes a checkpoint and a loss log.
    Train,
    /// Restores every PNG in a directory.
    Derain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also writes the first and second stage outputs.
        #[arg(long)]
        all_stages: bool,
    },
    /// Luma PSNR and SSIM between same-named PNGs.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Per-image CSV destination; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trains every stage and module variant and prints the comparison table.
    Ablate {
        /// Pairs at the end of the manifest held out for evaluation.
        #[arg(long, default_value_t = 4)]
        held_out: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.run.log).format_timestamp(None).init();
    match commands::run(&cli.run, cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
