//! The `wrapacc` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence or
//! unreachable calibration target, 4 I/O error.

mod commands;
mod provenance;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

pub use provenance::{RunManifest, OutputRecord, PROVENANCE_FILE};
pub use report::{render_report, ReportRow};

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "WRAPNET_SEED";

#[derive(Debug, Parser)]
#[command(name = "wrapacc", version, about = "Fixed-point inference and training with wrapping accumulators")]
pub struct Cli {
    /// Print progress to stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select activation step sizes from a target overflow rate.
    Calibrate(CalibrateArgs),
    /// Run the staged training pipeline on the synthetic task.
    Train(TrainArgs),
    /// Run a saved model under a chosen accumulator mode.
    Infer(InferArgs),
    /// Time GEMM kernels and print the speed-up table.
    Bench(BenchArgs),
    /// Per-neuron carry statistics of a model.
    CarrySim(CarrySimArgs),
    /// Collect training runs into result tables.
    Report(ReportArgs),
}

/// Where the synthetic data comes from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset seed; defaults to the run seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.3)]
    pub difficulty: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Model manifest (file or directory).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Target overflow rate in percent; repeat for a sweep.
    #[arg(long = "p", default_values_t = [5.0])]
    pub p: Vec<f64>,
    /// Accumulator bits; defaults to the model's.
    #[arg(long)]
    pub bits: Option<u32>,
    /// One step size shared by every layer.
    #[arg(long)]
    pub shared: bool,
    /// Training samples used for calibration.
    #[arg(long, default_value_t = 1024)]
    pub calibration_samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub accumulator_bits: Option<u32>,
    #[arg(long)]
    pub weight_bits: Option<u32>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Transition slope `k`, or `inf`.
    #[arg(long)]
    pub slope: Option<String>,
    /// Cyclic activation kind, or `none`.
    #[arg(long)]
    pub cyclic: Option<String>,
    #[arg(long)]
    pub p_target: Option<f64>,
    #[arg(long)]
    pub lambda_overflow: Option<f64>,
    #[arg(long)]
    pub lambda_carry: Option<f64>,
    /// Last stage to run: pretrain, calibrate, warmup or finetune.
    #[arg(long)]
    pub last_stage: Option<String>,
    #[arg(long)]
    pub simulate_carries: bool,
    /// Run the layer-by-layer carry adaptation after fine-tuning.
    #[arg(long)]
    pub schedule: bool,
    #[arg(long)]
    pub shared_step: bool,
    #[arg(long)]
    pub full_precision: bool,
    #[arg(long)]
    pub epochs_pretrain: Option<usize>,
    #[arg(long)]
    pub epochs_warmup: Option<usize>,
    #[arg(long)]
    pub epochs_finetune: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// exact32, wrapped:B, packed_isolated:B:W, packed_buffered:B:W or packed_contaminated:B:W.
    #[arg(long, default_value = "exact32")]
    pub acc_mode: String,
    /// Input rows as a headerless CSV or a `.bin` real tensor blob; the
    /// synthetic test split otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Apply carry simulation on layers that carry a stored mean.
    #[arg(long)]
    pub simulate_carries: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Named layer shape; repeatable. All presets when no shape is given.
    #[arg(long)]
    pub preset: Vec<String>,
    /// Explicit GEMM shape `MxKxN`; repeatable.
    #[arg(long)]
    pub shape: Vec<String>,
    /// Comma-separated accumulator modes; the first is the ratio reference.
    #[arg(long, value_delimiter = ',', default_values_t = [
        "wrapped:32".to_string(),
        "packed_isolated:16:64".to_string(),
        "packed_isolated:8:64".to_string(),
        "packed_buffered:8:64".to_string(),
    ])]
    pub modes: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CarrySimArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A second model to compare against (e.g. trained without the carry penalty).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of `train` runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Unreachable(_) => 3,
        Error::Io { .. } | Error::Checksum { .. } | Error::Version { .. } | Error::Format(_) => 4,
        _ => 2,
    }
}

/// Seed from the flag, then the config file, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(vec![format!("{SEED_ENV} = `{v}` is not an unsigned integer")])),
        Err(_) => Ok(0),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Calibrate(a) => commands::calibrate(a, verbose),
        Command::Train(a) => commands::train(a, verbose),
        Command::Infer(a) => commands::infer(a, verbose),
        Command::Bench(a) => commands::bench(a, verbose),
        Command::CarrySim(a) => commands::carry_sim(a, verbose),
        Command::Report(a) => report::report(a),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config(vec!["x".into()])), 2);
        assert_eq!(
            exit_code(&Error::Divergence {
                stage: "finetune".into(),
                epoch: 3,
                accuracy: 0.25
            }),
            3
        );
        assert_eq!(exit_code(&Error::Unreachable("p".into())), 3);
        assert_eq!(exit_code(&Error::Format("x".into())), 4);
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["wrapacc", "bench", "--preset", "resnet-64x56x56", "--reps", "1"]).unwrap();
        match cli.command {
            Command::Bench(b) => {
                assert_eq!(b.reps, 1);
                assert_eq!(b.modes.len(), 4);
            }
            _ => panic!(),
        }
        let cli = Cli::try_parse_from(["wrapacc", "calibrate", "--model", "m", "--p", "0", "--p", "5"]).unwrap();
        match cli.command {
            Command::Calibrate(c) => assert_eq!(c.p, vec![0.0, 5.0]),
            _ => panic!(),
        }
        assert!(Cli::try_parse_from(["wrapacc", "infer"]).is_err());
    }

    #[test]
    fn flag_seed_wins() {
        assert_eq!(resolve_seed(Some(4), Some(9)).unwrap(), 4);
        assert_eq!(resolve_seed(None, Some(9)).unwrap(), 9);
    }
}
