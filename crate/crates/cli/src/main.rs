mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser)]
#[command(name = "ltvobs", version, about = "Observers for linear time-varying systems with unknown inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lyapunov spectrum estimate of A(t) via the continuous QR flow.
    Spectrum(Common),
    /// Detectability of the non-stable directions and the minimal gain.
    Detect(DetectArgs),
    /// Constant-rank index and strong observability of (A, D, C) and (A - LC, D, C).
    CheckSo(Common),
    /// Tangent-subspace observer only.
    Observe(ObserveArgs),
    /// Full cascade: observer, differentiator bank and reconstruction.
    Reconstruct(ReconstructArgs),
    /// Boundedness certificates for A(t) or for the observer error system.
    Bibs(BibsArgs),
}

#[derive(Args, Clone)]
pub struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory for CSV files and plot scripts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override the simulation end time in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Override the step size in seconds.
    #[arg(long)]
    pub h: Option<f64>,
    /// Number of tracked directions.
    #[arg(long)]
    pub k: Option<usize>,
    /// Observer gain.
    #[arg(long)]
    pub p: Option<f64>,
    /// Seed for a random initial frame instead of the scenario's frame.
    #[arg(long)]
    pub frame_seed: Option<u64>,
    /// Record every n-th step in time series output.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Comma-separated gains; runs one pipeline per value concurrently.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
}

#[derive(Args, Clone)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stability margin used for the minimal gain suggestion.
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
}

#[derive(Args, Clone)]
pub struct ObserveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Replace the unknown input by zero.
    #[arg(long)]
    pub no_disturbance: bool,
    /// Start the observer at x0 plus a random unit error drawn from this seed.
    #[arg(long)]
    pub initial_error_seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    /// Measurement noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use exact output-error derivatives instead of the differentiator.
    #[arg(long)]
    pub oracle_derivatives: bool,
    /// Allow finite-difference gain derivatives when nu > 2.
    #[arg(long)]
    pub allow_finite_differences: bool,
    /// Replace the unknown input by zero.
    #[arg(long)]
    pub no_disturbance: bool,
    /// Override the differentiator Lipschitz constant.
    #[arg(long)]
    pub lipschitz: Option<f64>,
    /// Override the differentiator order.
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BibsTarget {
    /// The plant matrix A(t).
    A,
    /// The observer error matrix A(t) - L(t)C(t).
    Error,
}

#[derive(Args, Clone)]
pub struct BibsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "error")]
    pub matrix: BibsTarget,
    /// Shift of the diagonal entries in the quasi-integrability test.
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Spectrum(c) | Command::CheckSo(c) => c,
            Command::Detect(a) => &a.common,
            Command::Observe(a) => &a.common,
            Command::Reconstruct(a) => &a.common,
            Command::Bibs(a) => &a.common,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
