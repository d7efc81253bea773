//! Command-line interface for the msir library.
//!
//! Subcommands: fit, dim, project, simulate, classify. Every command with a
//! --seed is bit-reproducible. Exit codes: 0 success, 2 usage error, 3 data
//! validation error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "msir", version, about = "Dimension reduction via model-based sliced inverse regression")]
struct Cli {
    /// Worker threads for parallel sections (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GmmArgs {
    /// Largest number of mixture components per slice.
    #[arg(long, default_value_t = 5)]
    max_components: usize,

    /// Covariance structures to search (comma-separated codes:
    /// EII,VII,EEI,VEI,VVI,EEE,VVV; XXX is an alias for FULL1).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,

    /// EM convergence tolerance on the relative log-likelihood change.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,

    #[arg(long, default_value_t = 500)]
    max_iter: usize,

    /// Number of k-means++ seedings per mixture fit.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the estimator on a CSV dataset and write a fit document.
    Fit {
        /// Input CSV with a header row.
        #[arg(long)]
        input: PathBuf,
        /// Response column (name or 0-based index).
        #[arg(long)]
        response: String,
        /// Number of slices: "auto" or a positive integer.
        #[arg(long, default_value = "auto")]
        slices: String,
        /// Treat the response as discrete (one slice per distinct value).
        #[arg(long)]
        discrete: bool,
        #[command(flatten)]
        gmm: GmmArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output fit document (JSON).
        #[arg(long)]
        output: PathBuf,
    },
    /// Infer the structural dimension from a fit document and/or raw data.
    Dim {
        /// Fit document written by `fit` (enough for --method bic).
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Raw data; required for the permutation test.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        response: Option<String>,
        #[arg(long, default_value = "auto")]
        slices: String,
        #[arg(long)]
        discrete: bool,
        #[command(flatten)]
        gmm: GmmArgs,
        /// perm, bic, or both.
        #[arg(long, default_value = "both")]
        method: String,
        #[arg(long, default_value_t = 199)]
        permutations: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// zhuzhu or zmp.
        #[arg(long, default_value = "zhuzhu")]
        penalty: String,
        /// Compute the full p-value table instead of stopping at the first
        /// accepted dimension.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report output (a table is always printed).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Project new data onto the directions stored in a fit document.
    Project {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Response column to drop before projecting, if present in the file.
        #[arg(long)]
        response: Option<String>,
        #[arg(long)]
        dims: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the simulation benchmark grid.
    Simulate {
        /// Model id: 1..5 or "motivating".
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 0.0)]
        a: f64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Comma-separated subset of msir,sir,save,phd.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Slice counts to sweep (comma-separated); default: the automatic H.
        #[arg(long, value_delimiter = ',')]
        h_sweep: Option<Vec<usize>>,
        #[command(flatten)]
        gmm: GmmArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Long-format results CSV.
        #[arg(long)]
        output: PathBuf,
        /// Optional aggregate CSV (one row per cell and method).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train the reduced-subspace MAP classifier and predict a test set.
    Classify {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Label column in both files (name or 0-based index).
        #[arg(long)]
        label_col: String,
        #[arg(long)]
        dims: usize,
        #[command(flatten)]
        gmm: GmmArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Predictions CSV: row_id, predicted, posterior_<class>...
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit {
            input,
            response,
            slices,
            discrete,
            gmm,
            seed,
            output,
        } => commands::fit(&input, &response, &slices, discrete, &gmm, seed, &output),
        Command::Dim {
            fit,
            input,
            response,
            slices,
            discrete,
            gmm,
            method,
            permutations,
            alpha,
            penalty,
            exhaustive,
            seed,
            output,
        } => commands::dim(commands::DimArgs {
            fit,
            input,
            response,
            slices,
            discrete,
            gmm,
            method,
            permutations,
            alpha,
            penalty,
            exhaustive,
            seed,
            output,
        }),
        Command::Project {
            fit,
            input,
            response,
            dims,
            output,
        } => commands::project(&fit, &input, response.as_deref(), dims, &output),
        Command::Simulate {
            model,
            n,
            p,
            sigma,
            rho,
            a,
            reps,
            methods,
            h_sweep,
            gmm,
            seed,
            output,
            summary,
        } => commands::simulate(commands::SimulateArgs {
            model,
            n,
            p,
            sigma,
            rho,
            a,
            reps,
            methods,
            h_sweep,
            gmm,
            seed,
            output,
            summary,
        }),
        Command::Classify {
            train,
            test,
            label_col,
            dims,
            gmm,
            seed,
            output,
        } => commands::classify(&train, &test, &label_col, dims, &gmm, seed, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// CLI-level error with the documented exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(msir::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_data_error() => 3,
            CliError::Lib(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<msir::Error> for CliError {
    fn from(e: msir::Error) -> Self {
        CliError::Lib(e)
    }
}
