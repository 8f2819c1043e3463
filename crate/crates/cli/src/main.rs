mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(Vec<String>),
    Core(danet_core::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numeric failure.
    fn exit_code(&self) -> u8 {
        use danet_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Numeric(_) | E::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<danet_core::Error> for CliError {
    fn from(e: danet_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(p) => {
                write!(f, "invalid configuration:")?;
                for line in p {
                    write!(f, "\n  - {line}")?;
                }
                Ok(())
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "danet",
    version,
    about = "Dense average network load forecasting runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Single model file (default: <out>/train/model.danet).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Ensemble manifest (default: <out>/train-ensemble/ensemble.toml).
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic hourly series as CSV.
    Synthesize {
        #[arg(long, default_value_t = 120)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First hour, e.g. 2021-01-04T00:00 (the default).
        #[arg(long)]
        start: Option<String>,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one model; writes the model file and per-epoch losses.
    Train(Common),
    /// Train a bagged ensemble; writes member files and a manifest.
    TrainEnsemble(Common),
    /// Forecast the test range with a model or ensemble.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Score a model and/or ensemble on the test range.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Metrics for ensembles of size 1..=study.max_ensemble.
    SizeSweep(Common),
    /// Clean-test MAPE over the load/temperature noise grid.
    Robustness(Common),
    /// Input-gradient norm versus depth for each combine rule.
    GradStudy(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synthesize {
            days,
            seed,
            start,
            out,
            force,
        } => commands::synthesize(days, seed, start.as_deref(), &out, force),
        Command::Train(c) => commands::train(&c),
        Command::TrainEnsemble(c) => commands::train_ensemble(&c),
        Command::Predict { common, models } => commands::predict(&common, &models),
        Command::Evaluate { common, models } => commands::evaluate(&common, &models),
        Command::SizeSweep(c) => commands::size_sweep(&c),
        Command::Robustness(c) => commands::robustness(&c),
        Command::GradStudy(c) => commands::grad_study(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
