//! `dpbf`: command-line driver for the differentially private fine-tuning
//! engine. Subcommands cover training runs (`train`), benchmark sweeps
//! (`bench-scaling`, `bench-models`), the privacy accountant (`account`,
//! `calibrate`), and the analytic cost model (`complexity`,
//! `param-report`).
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
//! divergence, 1 anything else.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpbf_core::analysis::Method;
use dpbf_core::error::{Error, Result};

use config::RunSpec;

#[derive(Parser)]
#[command(name = "dpbf", version, about = "differentially private fine-tuning engine")]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Random seed; overrides the config's seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker thread count for the parallel kernels.
    #[arg(long, global = true, value_name = "N", env = "DPBF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training job described by --config.
    Train,
    /// Measure one-step wall time and ledger memory across feature lengths.
    BenchScaling(BenchScalingArgs),
    /// Find the largest batch each method fits under a memory budget.
    BenchModels(BenchModelsArgs),
    /// Epsilon spent by a given noise multiplier.
    Account(AccountArgs),
    /// Smallest noise multiplier meeting an epsilon budget.
    Calibrate(CalibrateArgs),
    /// Analytic per-layer time/space cost table.
    Complexity(ComplexityArgs),
    /// Parameter census (total, bias, bias fraction) of the configured network.
    ParamReport,
}

#[derive(Args)]
struct AccountArgs {
    /// Poisson sampling probability per step.
    #[arg(long)]
    q: f64,
    /// Noise multiplier.
    #[arg(long)]
    sigma: f64,
    /// Number of composed steps.
    #[arg(long)]
    steps: u64,
    /// Failure probability delta.
    #[arg(long)]
    delta: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Target epsilon budget.
    #[arg(long)]
    eps: f64,
    /// Failure probability delta.
    #[arg(long)]
    delta: f64,
    /// Poisson sampling probability per step.
    #[arg(long)]
    q: f64,
    /// Number of composed steps.
    #[arg(long)]
    steps: u64,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Batch size (flag form); with --config this is the batch the table
    /// assumes.
    #[arg(long)]
    b: Option<u64>,
    /// Rows per sample (sequence length or spatial sites).
    #[arg(long)]
    t: Option<u64>,
    /// Layer output width.
    #[arg(long)]
    p: Option<u64>,
    /// Layer input width.
    #[arg(long)]
    d: Option<u64>,
    /// Adapter rank for the low-rank methods.
    #[arg(long)]
    r: Option<u64>,
    /// Comma-separated methods; defaults to every method the rank allows.
    #[arg(long)]
    methods: Option<String>,
    /// Batch size when deriving layers from --config.
    #[arg(long)]
    batch: Option<u64>,
}

#[derive(Args)]
struct BenchScalingArgs {
    /// Comma-separated runnable methods.
    #[arg(
        long,
        default_value = "non_dp_full,opacus,ghost_clip,mix_ghost_clip,non_dp_bias,dp_bias"
    )]
    methods: String,
    /// Comma-separated feature lengths T (at least two).
    #[arg(long, default_value = "16,64,256")]
    t: String,
    /// Batch size.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Width of the benchmarked linear layer.
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct BenchModelsArgs {
    /// Comma-separated runnable methods.
    #[arg(
        long,
        default_value = "non_dp_full,opacus,ghost_clip,mix_ghost_clip,non_dp_bias,dp_bias"
    )]
    methods: String,
    /// Comma-separated hidden widths; each becomes one MLP.
    #[arg(long, default_value = "16,32,64")]
    widths: String,
    /// Ledger memory budget in bytes.
    #[arg(long)]
    budget: u64,
    /// Rows per sample.
    #[arg(long, default_value_t = 8)]
    t: usize,
    /// Input feature width.
    #[arg(long, default_value_t = 8)]
    dims: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

fn parse_usize_list(s: &str, flag: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            let x = x.trim();
            x.parse::<usize>()
                .map_err(|e| Error::Config(format!("{flag}: bad integer {x:?}: {e}")))
        })
        .collect()
}

fn parse_method_list(s: &str) -> Result<Vec<Method>> {
    s.split(',').map(|m| Method::parse(m.trim())).collect()
}

fn load_spec(cli: &Cli) -> Result<RunSpec> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config PATH".into()))?;
    config::load_config(path, cli.seed, cli.out.as_deref())
}

#[cfg(feature = "parallel")]
fn setup_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn setup_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        Some(n) if n > 1 => Err(Error::Config(
            "this binary was built without the parallel feature; --threads > 1 has no effect"
                .into(),
        )),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train => commands::cmd_train(&load_spec(&cli)?),
        Command::Account(a) => commands::cmd_account(a.q, a.sigma, a.steps, a.delta),
        Command::Calibrate(a) => commands::cmd_calibrate(a.eps, a.delta, a.q, a.steps),
        Command::ParamReport => commands::cmd_param_report(&load_spec(&cli)?),
        Command::Complexity(a) => {
            let csv = if cli.config.is_some() {
                let spec = load_spec(&cli)?;
                let methods = commands::parse_methods(a.methods.as_deref(), false)?;
                commands::complexity_from_spec(&spec, a.batch.or(a.b).unwrap_or(1), &methods)?
            } else {
                let (b, t, p, d) = match (a.b, a.t, a.p, a.d) {
                    (Some(b), Some(t), Some(p), Some(d)) => (b, t, p, d),
                    _ => {
                        return Err(Error::Config(
                            "complexity needs --b --t --p --d (plus optional --r), or --config"
                                .into(),
                        ))
                    }
                };
                let methods = commands::parse_methods(a.methods.as_deref(), a.r.is_some())?;
                commands::complexity_from_dims(b, t, p, d, a.r, &methods)?
            };
            commands::emit(&csv, cli.out.as_deref(), "complexity.csv")
        }
        Command::BenchScaling(a) => {
            let methods = parse_method_list(&a.methods)?;
            let ts = parse_usize_list(&a.t, "--t")?;
            let rows =
                bench::bench_scaling(&methods, &ts, a.batch, a.width, cli.seed.unwrap_or(0))?;
            commands::emit(&bench::rows_to_csv(&rows), cli.out.as_deref(), "bench_scaling.csv")
        }
        Command::BenchModels(a) => {
            let methods = parse_method_list(&a.methods)?;
            let widths = parse_usize_list(&a.widths, "--widths")?;
            let rows = bench::bench_models(
                &methods,
                &widths,
                a.budget,
                a.t,
                a.dims,
                a.classes,
                cli.seed.unwrap_or(0),
            )?;
            commands::emit(&bench::rows_to_csv(&rows), cli.out.as_deref(), "bench_models.csv")
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Input(_)
        | Error::Policy(_)
        | Error::Calibration(_)
        | Error::Dimension(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
