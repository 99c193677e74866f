use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use apbfl::ExecMode;
use apbfl_cli::experiment::with_overrides;
use apbfl_cli::sweep::read_sweep_file;
use apbfl_cli::{emit_plot, parse_config, run_experiment_with, run_sweep, Metric};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apbfl", version, about = "Federated learning with adaptive differential privacy budgets")]
struct Cli {
    /// Run client work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run one experiment per sweep cell.
    Sweep {
        /// Base experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Sweep definition (list of overrides or {cells, grid}).
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Plot rounds.csv files as an SVG line chart.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Accuracy)]
        metric: Metric,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::default() };
    match cli.command {
        Command::Run { config, seed, output_dir } => {
            let cfg = match parse_config(&config) {
                Ok(c) => with_overrides(c, seed, output_dir.as_deref()),
                Err(e) => return fail(1, anyhow::Error::new(e).context(format!("config {}", config.display()))),
            };
            match run_experiment_with(&cfg, mode) {
                Ok(report) => {
                    let s = &report.summary;
                    match s.error.as_deref() {
                        Some(err) => eprintln!("aborted after round {}: {err}", s.last_good_round),
                        None => println!(
                            "{}: final accuracy {:.4} -> {}",
                            s.label,
                            s.final_accuracy.unwrap_or(f64::NAN),
                            report.output_dir.display()
                        ),
                    }
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e) => {
                    let code = e.exit_code();
                    fail(code as u8, e.into())
                }
            }
        }
        Command::Sweep {
            config,
            sweep,
            seed,
            output_dir,
        } => {
            let base = match parse_config(&config) {
                Ok(c) => with_overrides(c, seed, None),
                Err(e) => return fail(1, anyhow::Error::new(e).context(format!("config {}", config.display()))),
            };
            let cells = match read_sweep_file(&sweep) {
                Ok(c) => c,
                Err(e) => return fail(1, e.into()),
            };
            let root = output_dir.unwrap_or_else(|| base.output_dir.clone());
            match run_sweep(&base, &cells, &root, mode) {
                Ok(index) => {
                    println!(
                        "{} cells, {} not completed -> {}",
                        index.cells.len(),
                        index.failed(),
                        root.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(2, e.into()),
            }
        }
        Command::Plot { csv, output, metric } => {
            match emit_plot(&csv, &output, metric).with_context(|| format!("plotting to {}", output.display())) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(1, e),
            }
        }
    }
}

fn fail(code: u8, err: anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(code)
}
