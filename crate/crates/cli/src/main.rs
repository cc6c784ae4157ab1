//! `quantlab`: calibrate, evaluate and compare activation quantization
//! schemes on QMOD models and QDS1 datasets.

mod commands;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use quantlab_core::corruptions::CorruptionKind;
use quantlab_core::schemes::Scheme;
use quantlab_core::surrogate::DEFAULT_COVERAGE;
use quantlab_core::Granularity;

#[derive(Parser)]
#[command(name = "quantlab", version, about = "Static, dynamic and probabilistic activation quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a static or probabilistic scheme and write the record.
    Calibrate(CalibrateArgs),
    /// Top-1 accuracy and per-layer metrics of one scheme.
    Eval(EvalArgs),
    /// FP32 and every scheme/granularity pair side by side.
    Compare(CompareArgs),
    /// Accuracy against the sampling stride and the calibration set size.
    Sweep(SweepArgs),
    /// Corrupt every image of a dataset with a sampled corruption.
    Corrupt(CorruptArgs),
    /// Memory and operation counts per weighted layer.
    Cost(CostArgs),
    /// Write the synthetic desk model and datasets.
    MakeDesk(MakeDeskArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Static,
    Dynamic,
    Prob,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Static => Scheme::Static,
            SchemeArg::Dynamic => Scheme::Dynamic,
            SchemeArg::Prob => Scheme::Probabilistic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Tensor,
    Channel,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Tensor => Granularity::PerTensor,
            GranularityArg::Channel => Granularity::PerChannel,
        }
    }
}

#[derive(Args, Clone)]
struct QuantArgs {
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, default_value_t = 32)]
    cast_bits: u32,
}

#[derive(Args, Clone)]
struct ProbArgs {
    /// Sampling stride of the conv estimator.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Target interval coverage.
    #[arg(long, default_value_t = DEFAULT_COVERAGE)]
    coverage: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "tensor")]
    granularity: GranularityArg,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    prob: ProbArgs,
    /// Use the first N samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Calibration record (static and prob).
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "tensor")]
    granularity: GranularityArg,
    #[command(flatten)]
    quant: QuantArgs,
    /// Corrupt each test image with a sampled corruption and severity.
    #[arg(long)]
    corrupt: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Integer kernels and fixed-point estimator instead of emulation.
    #[arg(long)]
    int_kernels: bool,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    calib_data: PathBuf,
    /// Calibration samples taken from the start of the calibration data.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    prob: ProbArgs,
    #[arg(long)]
    corrupt: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    int_kernels: bool,
    /// CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    calib_data: PathBuf,
    #[arg(long, value_enum, default_value = "channel")]
    granularity: GranularityArg,
    /// Calibration samples for the stride sweep.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value_t = DEFAULT_COVERAGE)]
    coverage: f64,
    /// Base seed of the calibration subsets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    int_kernels: bool,
    /// CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: PathBuf,
    /// Kinds to sample from (default: all).
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<CorruptionKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 32)]
    cast_bits: u32,
    /// CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDeskArgs {
    /// Directory for desk.qmod, desk_calib.qds and desk_test.qds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 1024)]
    calib: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QUANTLAB_THREADS") {
        let n: usize = v.parse().with_context(|| format!("QUANTLAB_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = init_threads().and_then(|()| match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Cost(a) => commands::cost(a),
        Command::MakeDesk(a) => commands::make_desk(a),
    });
    if let Err(e) = run {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
