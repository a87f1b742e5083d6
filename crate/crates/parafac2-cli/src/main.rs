//! Command-line frontend: `fit`, `synth` and `eval` subcommands.
//!
//! Exit codes: 0 success (fit: converged), 2 fit stopped at the iteration
//! cap without meeting the tolerance, 1 any error. Diagnostics go to
//! standard error; machine-readable results to files or standard output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use parafac2::tensor::SynthConfig;

use parafac2_cli::commands::{self, cmd_eval, cmd_fit, cmd_synth, SynthSettings};
use parafac2_cli::config::{parse_l0_flag, parse_l1_flag, parse_smooth_flag, FitSettings, Partial};

#[derive(Parser)]
#[command(
    name = "parafac2",
    about = "Constrained PARAFAC2 factorization of irregular sparse tensors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a constrained PARAFAC2 model and write factors, trace and summary.
    Fit(Box<FitArgs>),
    /// Generate a synthetic tensor with known ground-truth factors.
    Synth(SynthArgs),
    /// Recompute FIT and SPARSITY for a stored model against a tensor.
    Eval(EvalArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tensor file (the .days sidecar next to it is picked up automatically).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Timestamp file overriding the auto-detected sidecar.
    #[arg(long)]
    days: Option<PathBuf>,
    /// Output directory for factors, trace.json and summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Target rank R.
    #[arg(long)]
    rank: Option<usize>,
    /// Factors to constrain non-negative, e.g. H,W,V.
    #[arg(long)]
    nonneg: Option<String>,
    /// Hard-threshold (l0) sparsity: FACTOR=mu, e.g. V=49.
    #[arg(long)]
    l0: Option<String>,
    /// Soft-threshold (l1) sparsity: FACTOR=lambda, e.g. V=0.5.
    #[arg(long)]
    l1: Option<String>,
    /// Temporal smoothness on U_k: l=7,degree=3,gap-aware.
    #[arg(long)]
    smooth: Option<String>,
    /// Relative FIT change that stops the outer loop.
    #[arg(long)]
    outer_tol: Option<f64>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    /// ADMM relative residual tolerance.
    #[arg(long)]
    admm_tol: Option<f64>,
    #[arg(long)]
    admm_max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the default pool.
    #[arg(long)]
    threads: Option<usize>,
    /// Serialize reductions and zero wall-time fields for byte-identical
    /// reruns.
    #[arg(long)]
    deterministic: bool,
    /// Also write the per-slice U_k stack.
    #[arg(long)]
    emit_u: bool,
    /// Debug: recompute cached quantities every inner iteration.
    #[arg(long)]
    recompute_inner: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for tensor.tns, tensor.days and ground-truth factors.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of slices K.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Number of columns J.
    #[arg(long, default_value_t = 30)]
    j: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 8)]
    rows_min: usize,
    #[arg(long, default_value_t = 16)]
    rows_max: usize,
    /// Fraction of nonzero entries in the ground-truth V.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Gaussian noise level on the nonzero support.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding H.mtx, W.mtx, V.mtx, Q.mtx (and C.mtx when smooth).
    #[arg(long)]
    model_dir: PathBuf,
    /// Tensor file to evaluate against.
    #[arg(long)]
    input: PathBuf,
}

fn resolve_fit(args: FitArgs) -> Result<FitSettings, commands::CliError> {
    let base = match &args.config {
        Some(path) => Partial::from_config_file(path)?,
        None => Partial::default(),
    };
    let flags = Partial {
        input: args.input,
        days: args.days,
        out_dir: args.out_dir,
        rank: args.rank,
        nonneg: args
            .nonneg
            .as_deref()
            .map(|v| Partial::parse_nonneg("nonneg", v))
            .transpose()?,
        l0: args.l0.as_deref().map(parse_l0_flag).transpose()?,
        l1: args.l1.as_deref().map(parse_l1_flag).transpose()?,
        smooth: args.smooth.as_deref().map(parse_smooth_flag).transpose()?,
        outer_tol: args.outer_tol,
        max_outer_iters: args.max_outer_iters,
        admm_tol: args.admm_tol,
        admm_max_iters: args.admm_max_iters,
        seed: args.seed,
        threads: args.threads,
        deterministic: args.deterministic.then_some(true),
        emit_u: args.emit_u.then_some(true),
        recompute_inner: args.recompute_inner.then_some(true),
    };
    Ok(FitSettings::resolve(base.overridden_by(flags))?)
}

fn run(cli: Cli) -> Result<i32, commands::CliError> {
    match cli.command {
        Command::Fit(args) => {
            let settings = resolve_fit(*args)?;
            cmd_fit(&settings)
        }
        Command::Synth(args) => {
            let settings = SynthSettings {
                out_dir: args.out_dir,
                config: SynthConfig {
                    n_slices: args.k,
                    n_cols: args.j,
                    rank: args.rank,
                    rows_min: args.rows_min,
                    rows_max: args.rows_max,
                    density: args.density,
                    noise_level: args.noise,
                    seed: args.seed,
                },
            };
            cmd_synth(&settings)
        }
        Command::Eval(args) => cmd_eval(&args.model_dir, &args.input),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
