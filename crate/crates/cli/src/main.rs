//! `spiked`: phase diagrams, Langevin state evolution, annealing, FDT fits, complexity
//! curves, finite-N instances and parameter sweeps, written as CSV/JSON run directories.
//!
//! Exit codes: 0 success, 2 usage or invalid parameters, 3 numerical failure, 1 anything else.

mod commands;
mod config;
mod manifest;
mod sweep;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "spiked", version, about = "Numerical laboratory for the spiked matrix-tensor model")]
#[command(after_help = "Any subcommand accepts --config FILE with key = value defaults (see the README).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phase diagram over a (Δₚ, 1/Δ₂) grid, with boundary lines.
    #[command(args_override_self = true)]
    Phase(PhaseArgs),
    /// Langevin state evolution on the fixed or dynamic grid.
    #[command(args_override_self = true)]
    Lse(LseArgs),
    /// Fixed-grid LSE with exponential annealing of the tensor channel.
    #[command(args_override_self = true)]
    Anneal(AnnealArgs),
    /// Dynamic-grid run with two-time panes and the two-slope FDT fit.
    #[command(args_override_self = true)]
    Fdt(FdtArgs),
    /// 1RSB complexity curve and threshold states.
    #[command(args_override_self = true)]
    Complexity(ComplexityArgs),
    /// Finite-N instance with AMP or Langevin dynamics.
    #[command(args_override_self = true)]
    Instance(InstanceArgs),
    /// Parameter sweep described by a key = value spec file.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Tensor order.
    #[arg(long, default_value_t = 3)]
    pub p: u32,
    /// Matrix-channel variance (`inf` switches the channel off).
    #[arg(long)]
    pub delta2: f64,
    /// Tensor-channel variance (`inf` switches the channel off).
    #[arg(long)]
    pub deltap: f64,
}

#[derive(Args, Clone, Debug)]
pub struct OutArgs {
    /// Directory under which run directories are created.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Recompute even if a complete run with the same parameters exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone, Debug)]
pub struct PhaseArgs {
    #[arg(long, default_value_t = 3)]
    pub p: u32,
    #[arg(long, default_value_t = 0.05)]
    pub deltap_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub deltap_max: f64,
    #[arg(long, default_value_t = 100)]
    pub deltap_count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub inv_delta2_min: f64,
    #[arg(long, default_value_t = 2.5)]
    pub inv_delta2_max: f64,
    #[arg(long, default_value_t = 100)]
    pub inv_delta2_count: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Fixed,
    Dyn,
}

#[derive(Args, Clone, Debug)]
pub struct LseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Scheme::Dyn)]
    pub scheme: Scheme,
    /// Initial overlap with the signal.
    #[arg(long, default_value_t = spiked_core::lse_fixed::DEFAULT_CBAR0)]
    pub cbar0: f64,
    /// Fixed-grid time step.
    #[arg(long, default_value_t = spiked_core::lse_fixed::DEFAULT_DT)]
    pub dt: f64,
    #[arg(long, default_value_t = 100.0)]
    pub tmax: f64,
    /// Dynamic-grid intervals per stage.
    #[arg(long, default_value_t = spiked_core::lse_dyngrid::DEFAULT_NT)]
    pub nt: usize,
    /// Dynamic-grid doublings; by default the fewest that reach --tmax.
    #[arg(long)]
    pub doublings: Option<usize>,
    /// Initial dynamic-grid step.
    #[arg(long, default_value_t = spiked_core::lse_dyngrid::DEFAULT_DT0)]
    pub dt0: f64,
    /// Near-diagonal entries filled by translation.
    #[arg(long, default_value_t = spiked_core::lse_dyngrid::DEFAULT_NC)]
    pub nc: usize,
    /// Waiting times at which two-time panes are written.
    #[arg(long, value_delimiter = ',')]
    pub waiting_times: Vec<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct AnnealArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Amplitude C of the tensor-variance excess C·e^{−t/τ}.
    #[arg(long, default_value_t = 100.0)]
    pub c_amp: f64,
    /// Annealing times τ, one run each.
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,500")]
    pub tau_ann: Vec<f64>,
    #[arg(long, default_value_t = spiked_core::lse_fixed::DEFAULT_CBAR0)]
    pub cbar0: f64,
    #[arg(long, default_value_t = 0.02)]
    pub dt: f64,
    #[arg(long, default_value_t = 200.0)]
    pub tmax: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct FdtArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Waiting times t′ of the panes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub waiting_times: Vec<f64>,
    #[arg(long, default_value_t = spiked_core::lse_fixed::THRESHOLD_CBAR0)]
    pub cbar0: f64,
    #[arg(long, default_value_t = 1e4)]
    pub tmax: f64,
    #[arg(long, default_value_t = 512)]
    pub nt: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub dt0: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Parisi parameters: `lo:hi:count` (log-spaced) or a comma list; default 200 points on [0.01, 1].
    #[arg(long)]
    pub x_grid: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Amp,
    Langevin,
}

#[derive(Args, Clone, Debug)]
pub struct InstanceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Algo::Amp)]
    pub algo: Algo,
    /// AMP iterations.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Start AMP on the Nishimori line with this overlap instead of the N(0, 1e-8) default.
    #[arg(long)]
    pub m0: Option<f64>,
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value_t = 10.0)]
    pub tmax: f64,
    /// Langevin initial overlap.
    #[arg(long)]
    pub cbar0: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub record_every: usize,
    /// Regenerate the tensor from the seed instead of storing it.
    #[arg(long)]
    pub implicit: bool,
    /// Also write the instance container.
    #[arg(long)]
    pub save_instance: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    /// Sweep spec file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Worker threads; defaults to $SPIKED_WORKERS, then to the number of CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Keep finished points of an interrupted sweep.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Invalid command-line input detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    use spiked_core::Error as E;
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidParams(_) | E::Domain(_) | E::Unsupported(_) | E::MemoryBudget { .. } => 2,
                E::NoConvergence { .. } | E::Numerical { .. } | E::FitRejected(_) => 3,
                E::Io(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Phase(a) => commands::phase(&a),
        Command::Lse(a) => commands::lse(&a),
        Command::Anneal(a) => commands::anneal(&a),
        Command::Fdt(a) => commands::fdt(&a),
        Command::Complexity(a) => commands::complexity(&a),
        Command::Instance(a) => commands::instance(&a),
        Command::Sweep(a) => sweep::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
