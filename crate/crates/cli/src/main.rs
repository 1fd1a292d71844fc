use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod data;

/// Grid GMLE of mixing distributions for stratified survey counts.
#[derive(Debug, Parser)]
#[command(name = "gmle-mix", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "GMLE_MIX_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the mixing distribution to a dataset and report every estimator.
    Fit(FitArgs),
    /// Run a Monte Carlo table from a JSON configuration.
    Simulate(SimulateArgs),
    /// Confidence interval for the population proportion.
    Ci(CiArgs),
    /// Check that the fitted mixture approaches the empirical one as n grows.
    ProbeConvergence(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `poisson` or `binomial:<kappa>`.
    #[arg(long, default_value = "poisson")]
    pub model: String,

    /// Points per axis, or `lo:hi:n,lo:hi:n`.
    #[arg(long)]
    pub grid: Option<String>,

    /// EM iterations.
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with header `stratum_id,x,k`.
    pub data: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Thin each response with this retention probability before fitting.
    #[arg(long)]
    pub retain_prob: Option<f64>,

    /// Seed for thinning.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,

    /// Write per-stratum posterior means as CSV.
    #[arg(long)]
    pub posterior: Option<PathBuf>,

    /// Include the log-likelihood trace in the report.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation configuration (JSON).
    pub config: PathBuf,

    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Override the configured EM iterations.
    #[arg(long)]
    pub iters: Option<usize>,

    /// Override the configured replication count.
    #[arg(long)]
    pub replications: Option<usize>,

    /// Override the configured grid (`N` or `lo:hi:n,lo:hi:n`).
    #[arg(long)]
    pub grid: Option<String>,

    /// Output stem; writes `<stem>.json` and `<stem>.txt`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    /// CSV with header `stratum_id,x,k`.
    pub data: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// One minus the confidence level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Stratum parameters cycled over the array, as `size:p` pairs.
    #[arg(long, default_value = "2:0.4,1:0.6")]
    pub thetas: String,

    /// Comma-separated array sizes.
    #[arg(long, default_value = "100,400,1600")]
    pub sizes: String,

    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Failures, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Solver(gmle_mix::Error),
    #[error(transparent)]
    Infeasible(gmle_mix::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Input(_) => 2,
            Self::Solver(_) => 3,
            Self::Infeasible(_) => 4,
        }
    }
}

impl From<gmle_mix::Error> for CliError {
    fn from(e: gmle_mix::Error) -> Self {
        use gmle_mix::Error as E;
        let mut root = &e;
        while let E::Replication { source, .. } = root {
            root = source;
        }
        match root {
            E::Infeasible { .. } => Self::Infeasible(e),
            E::NonConvergence { .. }
            | E::ZeroMixtureLikelihood { .. }
            | E::TruncationSingular { .. }
            | E::CellMassDefect { .. } => Self::Solver(e),
            _ => Self::Input(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = gmle_mix::par::init_threads(threads) {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Ci(args) => commands::ci(&args),
        Command::ProbeConvergence(args) => commands::probe(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gmle_mix::Error;

    #[test]
    fn exit_codes_follow_error_kind() {
        let solver = Error::NonConvergence {
            what: "em",
            iterations: 5,
            gap: 1.0,
        };
        assert_eq!(CliError::from(solver).exit_code(), 3);
        let infeasible = Error::Infeasible {
            best: -10.0,
            threshold: -5.0,
        };
        assert_eq!(CliError::from(infeasible).exit_code(), 4);
        let wrapped = Error::Replication {
            index: 3,
            source: Box::new(Error::CellMassDefect { atom: 0, sum: 0.9 }),
        };
        assert_eq!(CliError::from(wrapped).exit_code(), 3);
        assert_eq!(CliError::from(Error::EmptyData).exit_code(), 2);
        assert_eq!(
            CliError::from(Error::ZeroLikelihoodRow { index: 0 }).exit_code(),
            2
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
