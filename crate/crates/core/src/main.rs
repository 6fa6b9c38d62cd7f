use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::runner;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated sharpness-aware training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every config matching a glob, one output directory per config.
    Sweep {
        pattern: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate final and best metrics of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        manifests: Vec<PathBuf>,
    },
    /// Evaluate the loss surface around a checkpoint.
    Surface {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the client partition a config produces.
    PartitionDump {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_DIVERGED: u8 = 2;

fn report_divergence(report: &runner::RunReport) -> bool {
    match &report.divergence {
        Some(d) => {
            eprintln!(
                "{}: diverged at round {}: {} (partial metrics kept)",
                report.out_dir.display(),
                d.round,
                d.reason
            );
            true
        }
        None => false,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => runner::run_config_file(&config, &out).map(|r| report_divergence(&r)),
        Command::Sweep { pattern, out } => runner::sweep(&pattern, &out).map(|reports| {
            let mut any = false;
            for r in &reports {
                any |= report_divergence(r);
            }
            any
        }),
        Command::Compare { manifests } => runner::compare(&manifests).map(|table| {
            print!("{table}");
            false
        }),
        Command::Surface { checkpoint, config, out } => {
            runner::surface_from_checkpoint(&checkpoint, &config, &out).map(|_| false)
        }
        Command::PartitionDump { config, out } => runner::partition_dump(&config, &out).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_DIVERGED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
