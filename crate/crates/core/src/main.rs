use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gndm::harness::{self, RawConfig};
use gndm::Error;

/// Group-normalized distribution matching on analytic mixture teachers.
#[derive(Parser)]
#[command(name = "gndm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory to resume from (ckpt/<iter>).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the cross product of an ablation grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Ablation axis as key=v1,v2,... (repeatable).
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
    /// Guidance-variance curve and the invariant suite.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render plots from an existing metrics.csv.
    Plot {
        /// Path to metrics.csv.
        #[arg(long)]
        metrics: PathBuf,
        /// Directory for the SVG files (defaults to plots/ next to the metrics).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or `base` for the built-in defaults.
    #[arg(long, default_value = "base")]
    config: String,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

const USAGE: u8 = 2;
const FAILURE: u8 = 1;

fn load(run: &RunArgs, grid: &[String]) -> Result<RawConfig, Error> {
    let mut raw = RawConfig::load(&run.config)?;
    for s in &run.set {
        raw.set(s)?;
    }
    for g in grid {
        raw.add_grid(g)?;
    }
    Ok(raw)
}

/// Config problems are usage errors; anything during a run is a failure.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => USAGE,
        _ => FAILURE,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(classify(&e))
}

fn out_dir(run: &RunArgs, default: &str) -> PathBuf {
    run.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let grid = match &cli.command {
        Command::Ablate { grid, .. } => grid.clone(),
        _ => Vec::new(),
    };
    let run = match &cli.command {
        Command::Train { run, .. } | Command::Ablate { run, .. } | Command::Diagnose { run } => Some(run),
        Command::Plot { .. } => None,
    };
    let raw = match run.map(|r| load(r, &grid)).transpose() {
        Ok(raw) => raw,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    match (&cli.command, raw) {
        (Command::Train { run, resume }, Some(raw)) => {
            let cfg = match raw.build() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let out = out_dir(run, "runs/train");
            match harness::train(&cfg, &out, resume.as_deref(), true) {
                Ok(outcome) => {
                    for c in &outcome.checks {
                        println!("{}", c.line());
                    }
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        (Command::Ablate { run, .. }, Some(raw)) => {
            let out = out_dir(run, "runs/ablate");
            match harness::ablate(&raw, &out, true) {
                Ok(runs) => {
                    let failed = runs.iter().filter(|r| r.result.is_err()).count();
                    println!("{} runs, {failed} failed; wrote {}", runs.len(), out.display());
                    if failed > 0 {
                        ExitCode::from(FAILURE)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(e),
            }
        }
        (Command::Diagnose { run }, Some(raw)) => {
            let cfg = match raw.build() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let out = out_dir(run, "runs/diagnose");
            match harness::diagnose(&cfg, &out) {
                Ok(outcome) => {
                    for (t, s) in &outcome.curve {
                        println!("t' {t:.3}  std {s:.6}");
                    }
                    for c in &outcome.checks {
                        println!("{}", c.line());
                    }
                    if outcome.checks.iter().all(|c| c.passed) {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(FAILURE)
                    }
                }
                Err(e) => fail(e),
            }
        }
        (Command::Plot { metrics, out }, _) => {
            let dir = out
                .clone()
                .unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).join("plots"));
            match harness::read_metrics(metrics).and_then(|(k, rows)| harness::plot_metrics(&rows, k, &dir)) {
                Ok(()) => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        _ => unreachable!("run arguments are loaded for every run command"),
    }
}
