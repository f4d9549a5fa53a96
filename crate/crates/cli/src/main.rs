//! `ldaf`: train, certify and evaluate stochastic LDAF classifiers.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ldaf_core::pipeline::{EvalMode, Split};

use config::RunConfig;

/// Error reported as a single `error[category]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, config::one_line(&self.message))
    }
}

impl From<ldaf_core::Error> for CliError {
    fn from(e: ldaf_core::Error) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ldaf", version, about = "Stochastic LDAF classifiers with PAC-Bayes risk certificates")]
struct Cli {
    /// Worker threads for data-parallel maps (default: logical cores).
    #[arg(long, global = true, env = "LDAF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set prior.steps=50` (repeatable; wins
    /// over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mean classifier on the training split and draw the prior.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Fit the posterior covariance on the validation split.
    TrainPosterior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the updated model here instead of in place.
        #[arg(long)]
        out_model: Option<PathBuf>,
    },
    /// Issue risk certificates on the validation split.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Confidence levels (overrides `certify.epsilon`).
        #[arg(long, num_args = 1..)]
        epsilon: Vec<f64>,
        /// Output directory (default: the model directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report error rates on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// deterministic, stochastic_mean or stochastic_expected (default: all).
        #[arg(long)]
        mode: Vec<String>,
    },
    /// QMC vs MC integration errors against a large MC reference.
    BenchIntegration {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "validation")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::new("argument", "--threads must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::new("threads", e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.overrides);
    match cli.command {
        Command::GenData { common, out } => commands::gen_data(&load(&common)?, &out),
        Command::TrainPrior { common, data, out_model } => {
            commands::train_prior_cmd(&load(&common)?, data.as_deref(), &out_model)
        }
        Command::TrainPosterior { common, model, data, out_model } => {
            commands::train_posterior_cmd(&load(&common)?, &model, data.as_deref(), out_model.as_deref())
        }
        Command::Certify { common, model, data, epsilon, out } => {
            let mut cfg = load(&common)?;
            if !epsilon.is_empty() {
                cfg.certify.epsilon = epsilon;
                cfg.validate()?;
            }
            commands::certify_cmd(&cfg, &model, data.as_deref(), out.as_deref())
        }
        Command::Evaluate { common, model, data, split, mode } => {
            let split = Split::parse(&split)?;
            let modes = mode.iter().map(|m| EvalMode::parse(m)).collect::<Result<Vec<_>, _>>()?;
            commands::evaluate_cmd(&load(&common)?, &model, data.as_deref(), split, &modes)
        }
        Command::BenchIntegration { common, model, data, split, out } => {
            commands::bench_cmd(&load(&common)?, &model, data.as_deref(), Split::parse(&split)?, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
