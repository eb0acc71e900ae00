//! Command-line front end of the `zdp` binary.
//!
//! Exit codes: 0 for success or a quiet verdict, 2 when a probe raises a
//! drift alarm, 1 for errors and unsatisfied certificates.

pub mod commands;
pub mod config;
pub mod matrix_file;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DRIFT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "zdp",
    version,
    about = "Null-space drift probes, thresholds and certificates"
)]
pub struct Cli {
    /// key = value file; command-line flags override its entries
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// RNG seed (default: $ZDP_SEED, then 0)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (JSON report, JSON lines, or matrix for `simulate`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe perturbed activations against the null space of a base matrix
    Probe(ProbeArgs),
    /// Print drift thresholds for every route
    Threshold(ThresholdArgs),
    /// Run one certificate check
    Certify(CertifyArgs),
    /// Run the online null-space tracker on a synthetic stream
    Track(TrackArgs),
    /// Write synthetic fixtures
    Simulate(SimulateArgs),
    /// Second-order KL check on a Fisher-silent softmax fixture
    FisherCheck(FisherArgs),
    /// Aggregate earlier JSON outputs
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub perturbed: Option<PathBuf>,
    /// default | relative:<f> | absolute:<tau>
    #[arg(long)]
    pub cutoff: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Noise variance, or `estimate` to use ||perturbed - base||_F^2 / d
    #[arg(long)]
    pub sigma2: Option<String>,
    /// lm | mp-edge | ratio | all
    #[arg(long)]
    pub route: Option<String>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// lm | mp-edge | ratio | all
    #[arg(long)]
    pub route: Option<String>,
    /// Also measure exceedance rates with this many Monte Carlo trials
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CertKind {
    VarianceLeak,
    RankLeak,
    DkResidual,
    TraceSandwich,
    Overlap,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(value_enum)]
    pub kind: CertKind,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub perturbed: Option<PathBuf>,
    /// Perturbation matrix dH
    #[arg(long)]
    pub perturbation: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Orthonormal basis file (estimated null basis, or the basis of P)
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Orthonormal basis of P*
    #[arg(long)]
    pub pstar: Option<PathBuf>,
    /// Symmetric PSD matrix Sigma
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long = "l")]
    pub l: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub cutoff: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Rows per batch
    #[arg(long = "batch-rows")]
    pub batch_rows: Option<usize>,
    /// Smallest nonzero eigenvalue of Sigma
    #[arg(long)]
    pub delta: Option<f64>,
    /// Largest eigenvalue of Sigma (defaults to delta)
    #[arg(long = "lambda-max")]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step constant (default 1/(4 ||Sigma||_2))
    #[arg(long)]
    pub c: Option<f64>,
    /// Start at the true null basis
    #[arg(long)]
    pub warm: bool,
    /// update | iterate
    #[arg(long)]
    pub deflation: Option<String>,
    /// Accuracy target for t_eps
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimKind {
    /// Rank-deficient base activations
    Base,
    /// Gaussian null activations
    Gaussian,
    /// Base plus a rank-one bump along a null direction
    NullBump,
    /// Low-rank factors at given principal angles to the null space
    Lora,
    /// Null-aligned low-rank updates on a synthetic layer
    Onal,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum)]
    pub kind: SimKind,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Comma-separated principal angles in radians
    #[arg(long)]
    pub angles: Option<String>,
    #[arg(long = "scale-a")]
    pub scale_a: Option<f64>,
    #[arg(long = "scale-b")]
    pub scale_b: Option<f64>,
    /// Where to write B (A goes to --out)
    #[arg(long = "out-b")]
    pub out_b: Option<PathBuf>,
    /// Where to write the null basis of the generated base
    #[arg(long = "basis-out")]
    pub basis_out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long = "reorth-period")]
    pub reorth_period: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated perturbation scales
    #[arg(long)]
    pub scales: Option<String>,
    /// image | null | mixed
    #[arg(long)]
    pub direction: Option<String>,
    /// Tilt one row of W along a null direction by this amount
    #[arg(long)]
    pub leak: Option<f64>,
    /// Exit 1 unless F V0 = 0 within tolerance
    #[arg(long = "require-silence")]
    pub require_silence: bool,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub inputs: Vec<PathBuf>,
    /// Directory for SVG plots
    #[arg(long = "plot-dir")]
    pub plot_dir: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match commands::dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_ERROR
        }
    }
}
