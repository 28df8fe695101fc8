mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hemp_core::datasets::DataError;
use hemp_core::HempError;

/// Entropy-regularized training and compression of small neural networks.
#[derive(Debug, Parser)]
#[command(name = "hemp", version, args_override_self = true)]
struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run everything on one thread.
    #[arg(long, global = true)]
    deterministic: bool,

    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an MLP with the entropy regularizer; writes the model and metrics.
    Train(TrainArgs),
    /// Quantize a continuous checkpoint into a container file.
    Compress(CompressArgs),
    /// Restore the quantized parameters of a container as a checkpoint.
    Decompress(DecompressArgs),
    /// Report top-1 accuracy, loss and file size of a model.
    Eval(EvalArgs),
    /// Gradient, stationary-point, bound and entropy checks.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BiasMode {
    Shared,
    Own,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitMode {
    Uniform,
    He,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    PerLayer,
    Global,
    Off,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,

    /// Dataset root (defaults to $HEMP_DATA_DIR, then ./data).
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    #[arg(long, default_value_t = 2000)]
    train_size: usize,

    #[arg(long, default_value_t = 1000)]
    test_size: usize,

    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Layer widths, input first.
    #[arg(long, default_value = "784x32x10")]
    arch: String,

    #[arg(long, default_value_t = 3)]
    levels: usize,

    /// Entropy order n.
    #[arg(long, default_value_t = 2)]
    order: usize,

    #[arg(long, default_value_t = 1.0)]
    lambda_h: f64,

    #[arg(long, default_value_t = 0.1)]
    lambda_e: f64,

    #[arg(long, default_value_t = 0.01)]
    lr: f64,

    #[arg(long, default_value_t = 0.9)]
    momentum: f64,

    #[arg(long, default_value_t = 100)]
    batch: usize,

    #[arg(long, default_value_t = 30)]
    epochs: usize,

    /// Epochs between Lloyd-Max refits.
    #[arg(long, default_value_t = 1)]
    refit_every: usize,

    #[arg(long, value_enum, default_value = "per-layer")]
    insensitivity: Scope,

    #[arg(long, value_enum, default_value = "shared")]
    bias_codebook: BiasMode,

    #[arg(long, value_enum, default_value = "uniform")]
    init: InitMode,

    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct CompressArgs {
    /// Continuous checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long, default_value_t = 3)]
    levels: usize,

    #[arg(long, default_value_t = 2)]
    order: usize,

    #[arg(long, value_enum, default_value = "shared")]
    bias_codebook: BiasMode,

    #[arg(long, default_value = "model.hemp")]
    out: PathBuf,

    /// Also write one byte per index (`index − 1`) for external compressors.
    #[arg(long, value_name = "PATH")]
    raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,

    #[arg(long, default_value = "restored.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// A `.hemp` container or a JSON checkpoint.
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct DiagnoseArgs {
    /// Checkpoint or container to inspect; a random problem when omitted.
    #[arg(long)]
    model: Option<PathBuf>,

    #[arg(long, default_value_t = 4)]
    levels: usize,

    /// Size of the random problem.
    #[arg(long, default_value_t = 128)]
    params: usize,

    /// Parameters sampled for the per-parameter checks of large models.
    #[arg(long, default_value_t = 256)]
    samples: usize,

    #[arg(long, default_value_t = 7)]
    seed: u64,

    #[arg(long, default_value = "diagnose.csv")]
    out: PathBuf,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<HempError>() {
            return match e {
                HempError::Diverged { .. } => EXIT_DIVERGED,
                HempError::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<DataError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
