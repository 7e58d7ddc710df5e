//! `cemx`: batch front end for the projection, kernels, edit jobs, metrics,
//! calibration, toy training and the HTTP service.

mod commands;
mod config;
mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cemx_core::imagekit::BoundaryMode;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cemx", version, about = "Explorable super-resolution toolkit", propagate_version = true)]
pub struct Cli {
    /// Print one JSON document instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// File of `key = value` lines used as flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Consistency-enforcing projection.
    #[command(subcommand)]
    Cem(CemCmd),
    /// Degradation kernel tools.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Session directories for edit jobs.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Headless edit jobs.
    #[command(subcommand)]
    Edit(EditCmd),
    /// Image quality and diversity metrics.
    Metrics(MetricsArgs),
    /// Structure-tensor percentile calibration.
    Calibrate(CalibrateArgs),
    /// Toy generator training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Finite-difference check of every objective and loss.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OperatorArgs {
    /// Integer scale factor.
    #[arg(long)]
    pub scale: usize,
    /// Kernel JSON; bicubic for the scale when omitted.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Use kernel taps as stored instead of scaling them to unit sum.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value = "periodic")]
    pub boundary: BoundaryMode,
}

#[derive(Debug, Subcommand)]
pub enum CemCmd {
    /// Project a candidate onto the images consistent with an LR input.
    Apply {
        #[arg(long)]
        lr: PathBuf,
        /// HR candidate; the generator output (with --weights) or a bicubic
        /// upsample otherwise.
        #[arg(long)]
        cand: Option<PathBuf>,
        /// Generator weights used when no candidate is given.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        op: OperatorArgs,
        /// Output image; `.bin` keeps full precision.
        #[arg(long)]
        out: PathBuf,
    },
    /// Residual of an HR image against an LR input.
    Check {
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[command(flatten)]
        op: OperatorArgs,
        /// Fail with exit code 4 when the L-inf residual exceeds this.
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum KernelCmd {
    /// Write the bicubic kernel for a scale.
    Bicubic {
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the inverse filter of the composed kernel.
    Invert {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Side of the square LR grid.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Relative floor on spectrum magnitudes.
        #[arg(long, default_value_t = cemx_core::kernel::DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        no_normalize: bool,
        /// Print spectrum statistics.
        #[arg(long)]
        report: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SessionMode {
    Direct,
    Generator,
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    /// Create a session directory from an LR image.
    Init {
        #[arg(long)]
        lr: PathBuf,
        #[command(flatten)]
        op: OperatorArgs,
        #[arg(long, value_enum, default_value = "direct")]
        mode: SessionMode,
        /// Generator weights for generator mode; a seeded toy network otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Smoothness weight on direct latents.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EditCmd {
    /// Run one job spec against a session directory.
    Run {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Where to write the edited session; in place when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Rmse,
    Psnr,
    Diversity,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(value_enum)]
    pub metric: Metric,
    /// Reference HR image; optional for diversity.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Directory of outputs, or a single image.
    #[arg(long)]
    pub outputs: PathBuf,
    /// Scale factor of the operator used by diversity.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value = "periodic")]
    pub boundary: BoundaryMode,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure tensors on generator outputs instead of the images.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Critic and generator on random crops, generator gated by the critic.
    Toy(TrainToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// Side of the square HR crops.
    #[arg(long, default_value_t = 16)]
    pub crop: usize,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub no_normalize: bool,
    /// Starting weights; a seeded toy network otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub generator_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub critic_lr: f64,
    #[arg(long, default_value_t = 10)]
    pub map_iters: usize,
    /// Per-step history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check every registered objective.
    #[arg(long)]
    pub all: bool,
    /// Check only objectives whose name contains this.
    #[arg(long, conflicts_with = "all")]
    pub only: Option<String>,
    /// Side of the random test images.
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; `CEMX_ADDR` or 127.0.0.1:8787 when omitted.
    #[arg(long)]
    pub addr: Option<String>,
}

fn parse_cli(args: Vec<OsString>) -> CliResult<Result<Cli, clap::Error>> {
    let mut cmd = Cli::command();
    if let Some(path) = config::find_config_arg(&args) {
        let values = config::load(&PathBuf::from(path))?;
        cmd = config::apply(cmd, &values)?;
    }
    Ok(cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)))
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let json = args.iter().any(|a| a == "--json");
    let cli = match parse_cli(args) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => e.exit(),
        Err(e) => return fail(&e, json),
    };
    match commands::run(&cli) {
        Ok(out) => {
            if cli.json {
                emit(&format!("{}\n", serde_json::to_string_pretty(&out.json).expect("json output")));
            } else {
                emit(&out.text);
            }
            match out.failure {
                None => ExitCode::SUCCESS,
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Err(e) => fail(&e, cli.json),
    }
}

fn fail(e: &CliError, json: bool) -> ExitCode {
    if json {
        let doc = serde_json::json!({ "error": e.to_string(), "kind": e.kind(), "exit_code": e.exit_code() });
        emit(&format!("{}\n", serde_json::to_string_pretty(&doc).expect("json output")));
    } else {
        eprintln!("error: {e}");
    }
    ExitCode::from(e.exit_code() as u8)
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}
