//! `tme`: simulate, fit, benchmark and inspect tensor mixed effects models.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 I/O failure or corrupt
//! input, 4 no convergence (the fit is still written) or numerical
//! breakdown, 5 sample size below the existence bound.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod settings;

use settings::{Settings, SharedArgs};

#[derive(Parser, Debug)]
#[command(name = "tme", version, about = "Tensor mixed effects models for third-order array data")]
struct Cli {
    #[command(flatten)]
    shared: SharedArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a ground truth and responses; writes samples.txt and truth.txt.
    Simulate {
        /// `study` (30x5x5) or `raman` (256x5x5 spectral maps).
        #[arg(long)]
        preset: Option<String>,
        /// Number of responses.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit a TME model to a tensor batch; writes fit.txt and trace.csv.
    Fit {
        input: PathBuf,
    },
    /// Replicated comparison of TME, TFE and TD; writes table2.csv,
    /// table3.csv, replicates.csv and timings.csv.
    Benchmark {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Covariance diagnostics of one or more fit files; writes report.csv.
    Report {
        #[arg(required = true)]
        fits: Vec<PathBuf>,
        /// Comma-separated row labels, one per fit (default: file stems).
        #[arg(long)]
        labels: Option<String>,
    },
    /// Existence and identifiability preflight for a sample size.
    Check {
        /// Tensor batch to read dims and N from.
        input: Option<PathBuf>,
        /// `J,K,L`.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    NotConverged,
    Numerical(String),
    Existence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NotConverged | CliError::Numerical(_) => 4,
            CliError::Existence(_) => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::Io(m) => format!("input/output error: {m}"),
            CliError::NotConverged => "iteration limit reached without convergence; fit written".into(),
            CliError::Numerical(m) => format!("numerical failure: {m}"),
            CliError::Existence(m) => format!("existence violated: {m}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.shared)?;
    match cli.command {
        Command::Simulate { preset, n } => commands::simulate(&settings, preset.as_deref(), n),
        Command::Fit { input } => commands::fit(&settings, &input),
        Command::Benchmark { preset } => commands::benchmark(&settings, preset.as_deref()),
        Command::Report { fits, labels } => commands::report(&settings, &fits, labels.as_deref()),
        Command::Check { input, dims, n } => commands::check(&settings, input.as_deref(), dims.as_deref(), n),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tme: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
