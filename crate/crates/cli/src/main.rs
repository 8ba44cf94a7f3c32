//! `visitsim`: simulate panels with informative visit processes, fit the
//! five estimators and run Monte Carlo studies.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.

mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use visitsim_core::config::schema_help;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "visitsim",
    version,
    about = "Longitudinal panels with informative visit processes"
)]
pub struct Cli {
    /// Worker threads for simulation and fitting (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Where the scenario comes from: a config file or a shipped preset.
#[derive(Debug, Clone, Args)]
pub struct ScenarioSource {
    /// Scenario config file (TOML; keys listed below).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped scenario, e.g. jm_g15_l030.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed; overrides VISITSIM_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Quadrature {
    Adaptive,
    Standard,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one panel and write it as CSV.
    #[command(after_help = schema_help())]
    Simulate {
        #[command(flatten)]
        source: ScenarioSource,
        /// Replication number; each one draws from its own random stream.
        #[arg(long, default_value_t = 1)]
        rep: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model to a panel CSV.
    #[command(after_help = schema_help())]
    Fit {
        #[arg(long)]
        panel: PathBuf,
        /// One of A, B, C, D, E.
        #[arg(long)]
        model: String,
        /// Frailty integration for model A.
        #[arg(long, value_enum, default_value_t = Quadrature::Adaptive)]
        quadrature: Quadrature,
        /// Gauss-Hermite nodes for model A.
        #[arg(long, default_value_t = 25)]
        order: usize,
        /// Visit-intensity covariates for model E: z, or z,y_prev.
        #[arg(long, default_value = "z")]
        weight_covariates: String,
        /// Write model E visit weights to this CSV.
        #[arg(long)]
        weights_out: Option<PathBuf>,
        /// Write per-subject log-likelihood contributions of model A to this CSV.
        #[arg(long)]
        dump_loglik: Option<PathBuf>,
        /// Fit result as JSON; printed to standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study and write estimates and performance CSVs.
    #[command(after_help = schema_help())]
    RunStudy {
        #[command(flatten)]
        source: ScenarioSource,
        /// Replications (default: the config's study.reps, else 200).
        #[arg(long)]
        reps: Option<usize>,
        /// Full-scale study with 1000 replications.
        #[arg(long, conflicts_with = "reps")]
        full: bool,
        /// Comma-separated subset of A,B,C,D,E (default: all).
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long, value_enum, default_value_t = Quadrature::Adaptive)]
        quadrature: Quadrature,
        /// Gauss-Hermite nodes for model A (default: the config's, else 25).
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute performance measures from an estimates CSV.
    #[command(after_help = schema_help())]
    Summarize {
        #[arg(long)]
        estimates: PathBuf,
        /// Scenario whose true values the estimates are compared with.
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise simulated panels: rows, measurements per subject, gap times.
    #[command(after_help = schema_help())]
    Describe {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        /// Quartiles as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a panel for informative visiting: Spearman correlation of gap
    /// times with a covariate, and the Andersen-Gill hazard ratio.
    #[command(after_help = schema_help())]
    Diagnose {
        #[arg(long)]
        panel: PathBuf,
        /// z or y_prev.
        #[arg(long, default_value = "z")]
        covariate: String,
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// Seed for the permutation test.
        #[arg(long, default_value_t = 1)]
        perm_seed: u64,
        /// Diagnostics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { source, rep, out } => commands::simulate(&source, rep, &out),
        Command::Fit {
            panel,
            model,
            quadrature,
            order,
            weight_covariates,
            weights_out,
            dump_loglik,
            out,
        } => commands::fit(commands::FitArgs {
            panel: &panel,
            model: &model,
            quadrature,
            order,
            weight_covariates: &weight_covariates,
            weights_out: weights_out.as_deref(),
            dump_loglik: dump_loglik.as_deref(),
            out: out.as_deref(),
        }),
        Command::RunStudy {
            source,
            reps,
            full,
            models,
            quadrature,
            order,
            out_dir,
        } => commands::run_study(commands::StudyArgs {
            source: &source,
            reps: if full { Some(1000) } else { reps },
            models: models.as_deref(),
            quadrature,
            order,
            out_dir: &out_dir,
        }),
        Command::Summarize {
            estimates,
            source,
            out,
        } => commands::summarize(&estimates, &source, &out),
        Command::Describe { source, reps, out } => {
            commands::describe(&source, reps, out.as_deref())
        }
        Command::Diagnose {
            panel,
            covariate,
            permutations,
            perm_seed,
            out,
        } => commands::diagnose(&panel, &covariate, permutations, perm_seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
