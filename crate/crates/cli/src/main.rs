mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Latent DIF analysis with a mixture 2-PL model and L1-penalized DIF effects.
#[derive(Debug, Parser)]
#[command(name = "latentdif", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "LATENT_DIF_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one data set from a simulation design.
    Simulate(SimulateArgs),
    /// Select λ (and optionally K) by BIC and write the selected model.
    Fit(FitArgs),
    /// Fit the regularization path for a fixed K.
    Path(PathArgs),
    /// Compare candidate numbers of classes by BIC.
    SelectK(SelectKArgs),
    /// MAP classes and posteriors under given parameters.
    Classify(ClassifyArgs),
    /// Run a replicated simulation study.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct EstimationArgs {
    #[arg(long, default_value_t = 31)]
    pub quad_nodes: usize,
    /// Stopping tolerance on the change of the penalized objective.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// Random starts per fit.
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
}

#[derive(Debug, Args)]
pub struct LambdaArgs {
    /// Comma-separated increasing λ grid.
    #[arg(long, conflicts_with = "lambda_auto")]
    pub lambdas: Option<String>,
    /// Data-driven grid (the default).
    #[arg(long)]
    pub lambda_auto: bool,
    /// Grid size for the automatic grid.
    #[arg(long, default_value_t = 20)]
    pub n_lambdas: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation design JSON.
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Replication index; each index draws from its own random stream.
    #[arg(long, default_value_t = 0)]
    pub replication: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Responses CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Number of non-reference classes.
    #[arg(long, required_unless_present = "k_auto", conflicts_with = "k_auto")]
    pub k: Option<usize>,
    /// Choose K by BIC among --k-candidates.
    #[arg(long)]
    pub k_auto: bool,
    #[arg(long, default_value = "0,1,2")]
    pub k_candidates: String,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelectKArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value = "0,1,2")]
    pub k_candidates: String,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Parameters JSON as written by `fit`.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 31)]
    pub quad_nodes: usize,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Overrides the design's replication count.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Skip the known-membership comparator fits.
    #[arg(long)]
    pub no_oracle: bool,
    #[command(flatten)]
    pub lambda: LambdaArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input files (exit 2).
    Usage(anyhow::Error),
    /// Estimation did not produce a result (exit 3).
    Fit(anyhow::Error),
    /// An internal consistency check failed (exit 4).
    Invariant(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Fit(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Fit(e) | CliError::Invariant(e) => e,
        }
    }
}

impl From<latentdif::Error> for CliError {
    fn from(e: latentdif::Error) -> Self {
        use latentdif::Error as E;
        match e {
            E::Usage(_) | E::Dimension(_) => CliError::Usage(e.into()),
            E::NonFinite(_) | E::AllStartsFailed { .. } => CliError::Fit(e.into()),
            E::Invariant(_) => CliError::Invariant(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
