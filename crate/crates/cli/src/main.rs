mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lutkv::Error;

/// Lookup-table attention over rotated, scalar-quantized key caches.
///
/// Every subcommand is deterministic given its flags. Reports are JSON,
/// artifacts are binary.
#[derive(Debug, Parser)]
#[command(name = "lutkv", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Lloyd-Max codebook for N(0, 1/d) and write its f16 ROM.
    SolveCodebook(SolveCodebookArgs),
    /// Write a sign ROM of seed-derived random signs, one record per layer.
    GenSigns(GenSignsArgs),
    /// Pick per-layer signs by minimizing quantization MSE over calibration keys.
    OptimizeSigns(OptimizeSignsArgs),
    /// Quantize a key matrix into a packed cache file.
    Quantize(QuantizeArgs),
    /// Score queries against a packed cache through the lookup-table path.
    SimulateAttention(SimulateArgs),
    /// Count multiplications on the lookup path and the dequantize-then-dot path.
    BenchMults(BenchArgs),
    /// Quality sweep over synthetic or supplied keys.
    Eval(EvalArgs),
    /// Per-layer mean key norms and the max/min ratio.
    DiagnoseNorms(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct SolveCodebookArgs {
    /// Head dimension (power of two).
    #[arg(long)]
    d: usize,
    /// Bits per coordinate (1 to 8).
    #[arg(long)]
    b: u8,
    /// Convergence tolerance on both optimality residuals.
    #[arg(long, default_value_t = lutkv::codebook::DEFAULT_TOL)]
    tol: f64,
    /// Output ROM path; a `<out>.json` sidecar records d and b.
    #[arg(long, default_value = "codebook.cbrom")]
    out: PathBuf,
    /// Residual report path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenSignsArgs {
    #[arg(long)]
    d: usize,
    /// Layer l uses seed + l.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value = "signs.sgn")]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OptimizeSignsArgs {
    /// Calibration key files, one per layer, in layer order.
    #[arg(long, required = true, num_args = 1..)]
    keys: Vec<PathBuf>,
    /// Row width; required for binary f64 key files.
    #[arg(long)]
    d: Option<usize>,
    /// Number of random candidates per layer.
    #[arg(long, default_value_t = 200)]
    candidates: usize,
    #[arg(long, default_value_t = 3)]
    b: u8,
    /// Candidate seeds are base_seed+1 ..= base_seed+candidates.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value = "signs.sgn")]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Key matrix: .txt/.csv/.tsv text or raw little-endian f64.
    #[arg(long)]
    keys: PathBuf,
    /// Head dimension; taken from the sign ROM or key file when omitted.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    b: Option<u8>,
    /// Sign ROM produced by gen-signs or optimize-signs.
    #[arg(long, conflicts_with = "seed")]
    signs: Option<PathBuf>,
    /// Layer record to use from the sign ROM.
    #[arg(long, default_value_t = 0)]
    layer: u32,
    /// Derive signs from this seed instead of a ROM.
    #[arg(long)]
    seed: Option<u64>,
    /// Codebook ROM; solved on the fly when omitted.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Comparator used for the cell search.
    #[arg(long, value_enum, default_value_t = Comparator::Flat)]
    comparator: Comparator,
    /// Layer id written into the cache header (defaults to --layer).
    #[arg(long)]
    layer_id: Option<u32>,
    #[arg(long, default_value = "cache.kvq")]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Comparator {
    Flat,
    BinarySearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Double,
    Fp16,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Query matrix, one query per row.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Sign ROM; all-ones signs are not assumed, so this or --seed is needed.
    #[arg(long, conflicts_with = "seed")]
    signs: Option<PathBuf>,
    /// Sign ROM record to use (defaults to the cache's layer id).
    #[arg(long)]
    layer: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Double)]
    mode: Mode,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    b: u8,
    /// Sequence length.
    #[arg(long = "T", default_value_t = 4096)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Synthetic key spec (JSON with d, n, layers, seed).
    #[arg(long, conflicts_with = "keys", required_unless_present = "keys")]
    synthetic: Option<PathBuf>,
    /// Key files, one per layer.
    #[arg(long, num_args = 1..)]
    keys: Vec<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    /// Bit-widths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [2u8, 3, 4])]
    b: Vec<u8>,
    /// Sign seeds to sweep; the first also drives the pipeline metrics.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    seeds: Vec<u64>,
    /// Number of random queries for inner-product metrics.
    #[arg(long, default_value_t = 8)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    query_seed: u64,
    /// Noise levels for the exp-bias probe.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.1, 0.5, 1.0])]
    jensen_sigmas: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    jensen_trials: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-(layer, seed, b) MSE table for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Key files, one per layer.
    #[arg(long, required = true, num_args = 1..)]
    keys: Vec<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Format(_) => 4,
        Error::ConfigConflict(_) => 5,
        Error::InvalidDimension(_)
        | Error::InvalidBitWidth(_)
        | Error::InvalidInput(_)
        | Error::EmptyCalibration => 6,
        Error::NonConvergence { .. } => 7,
        Error::CorruptRom(_) | Error::CorruptCache(_) => 8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SolveCodebook(a) => commands::solve_codebook(a),
        Command::GenSigns(a) => commands::gen_signs(a),
        Command::OptimizeSigns(a) => commands::optimize_signs(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::SimulateAttention(a) => commands::simulate_attention(a),
        Command::BenchMults(a) => commands::bench_mults(a),
        Command::Eval(a) => commands::eval(a),
        Command::DiagnoseNorms(a) => commands::diagnose_norms(a),
    };
    match result {
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
    fn error_classes_have_distinct_codes() {
        let classes = [
            Error::Io(std::io::Error::other("x")),
            Error::Format("x".into()),
            Error::ConfigConflict("x".into()),
            Error::InvalidInput("x".into()),
            Error::NonConvergence {
                iterations: 1,
                residual: 1.0,
            },
            Error::CorruptCache("x".into()),
        ];
        let mut codes: Vec<u8> = classes.iter().map(exit_code).collect();
        assert!(codes.iter().all(|&c| c != 0 && c != 1 && c != 2));
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), classes.len());
        assert_eq!(exit_code(&Error::CorruptRom("x".into())), exit_code(&Error::CorruptCache("x".into())));
        assert_eq!(exit_code(&Error::EmptyCalibration), exit_code(&Error::InvalidInput("x".into())));
    }
}
