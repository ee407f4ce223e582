use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlab_cli::commands::{self, TheoryArgs};
use tlab_cli::config::TheoryMethod;
use tlab_cli::error::CliResult;
use tlab_cli::plot::Panel;
use tlab_cli::selftest;

/// Transfer-learning experiments: simulation sweeps, closed-form tables and figures.
#[derive(Debug, Parser)]
#[command(name = "tlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir` or `out/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep finished rows from an earlier run in the output directory.
        #[arg(long)]
        resume: bool,
        /// Full-scale dimensions (d = 500, m = 1000).
        #[arg(long)]
        full: bool,
    },
    /// Tabulate closed-form transferability over a (gamma, theta) grid.
    Theory {
        #[arg(long, value_enum)]
        method: TheoryMethod,
        /// A:B:STEP
        #[arg(long, allow_hyphen_values = true)]
        gamma: String,
        /// A:B:STEP
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one figure panel from a results file.
    Plot {
        results: PathBuf,
        #[arg(long, value_enum)]
        panel: Panel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast internal consistency checks.
    Selftest,
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            resume,
            full,
        } => {
            let threads = commands::threads_from_env()?;
            let report = commands::run(&config, out, resume, full, threads)?;
            println!(
                "wrote {} rows ({} reused) to {} in {:.1} s",
                report.rows,
                report.reused,
                report.out_dir.display(),
                report.seconds
            );
            if report.failed_cells > 0 {
                eprintln!("{} cell(s) failed; see summary.json", report.failed_cells);
            }
            Ok(true)
        }
        Command::Theory {
            method,
            gamma,
            theta,
            sigma,
            lambda,
            out,
        } => {
            let rows = commands::theory(&TheoryArgs {
                method,
                gamma,
                theta,
                sigma,
                lambda,
                out: out.clone(),
            })?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(true)
        }
        Command::Plot { results, panel, out } => {
            commands::plot(&results, panel, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Selftest => {
            let threads = commands::threads_from_env()?;
            let failures = commands::with_pool(threads, selftest::run)?;
            println!("selftest: {failures} failure(s)");
            Ok(failures == 0)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
