//! `artl`: command-line front end for the transducer-loss engine.
//!
//! Exit codes: 0 success, 1 usage / I/O / format errors, 2 infeasible band.

mod checkpoint;
mod commands;
mod config;
mod error;
mod records;
mod tensor;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "artl", version, about = "Standard and alignment-restricted transducer losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Loss (and optional gradient) of one lattice.
    Loss(LossArgs),
    /// Word-piece alignment labels from word-level alignments.
    Align(AlignArgs),
    /// Beam-decode a lattice and print its emission timeline as JSON.
    Decode(DecodeArgs),
    /// Simulate an end-pointer over a corpus of utterances.
    Endpoint(EndpointArgs),
    /// Train the toy transducer on synthetic data and save a checkpoint.
    TrainToy(TrainToyArgs),
    /// Right-band sweep on the toy task.
    Sweep(SweepArgs),
    /// Packed versus dense loss cost.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// `[T, U+1, D]` TensorFile of log-probabilities (or raw scores with --logits).
    #[arg(long)]
    pub lattice: PathBuf,
    /// Target ids: inline JSON list or a file holding one.
    #[arg(long)]
    pub target: String,
    /// Alignment labels (encoder frames): inline JSON list or file.
    #[arg(long)]
    pub align: Option<String>,
    #[arg(long)]
    pub bl: Option<usize>,
    #[arg(long)]
    pub br: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub blank: usize,
    /// Treat the lattice as unnormalized joiner scores.
    #[arg(long)]
    pub logits: bool,
    /// Write the gradient (same shape, f64) here.
    #[arg(long)]
    pub grad: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// JSONL of utterance records.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "as2")]
    pub strategy: String,
    /// Acoustic-to-encoder frame divisor.
    #[arg(long, default_value_t = artl_core::align::DEFAULT_SUBSAMPLE)]
    pub subsample: usize,
    /// Output JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// `[T, U+1, D]` TensorFile of log-probabilities; U caps the output length.
    #[arg(long)]
    pub lattice: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_symbols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub blank: usize,
    #[arg(long)]
    pub eos: Option<usize>,
    #[arg(long)]
    pub frame_seconds: Option<f64>,
    /// Reference tokens for delay measurement (inline list or file).
    #[arg(long)]
    pub reference: Option<String>,
    /// Reference end frames, one per reference token.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// JSONL of end-pointer inputs.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub t_static: Option<f64>,
    #[arg(long)]
    pub alpha_eoq: Option<f64>,
    #[arg(long)]
    pub t_eoq_ms: Option<f64>,
    #[arg(long)]
    pub alpha_e2e: Option<f64>,
    #[arg(long)]
    pub t_e2e_ms: Option<f64>,
    /// Static fall-back seconds for nep/e2e, or `none`.
    #[arg(long)]
    pub fallback_static: Option<String>,
    /// Silence appended to every utterance, in seconds.
    #[arg(long)]
    pub append_silence: Option<f64>,
    /// CSV report (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-utterance outcomes as JSONL.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub bl: Option<usize>,
    /// Synthetic training utterances.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Synthetic held-out utterances.
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub frame_seconds: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub common: ToyArgs,
    /// `standard` or `ar`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub br: Option<usize>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV (`step,loss`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ToyArgs,
    /// Comma-separated right bands; `inf` trains with the unrestricted loss.
    #[arg(long)]
    pub br: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "T", default_value_t = 200)]
    pub frames: usize,
    #[arg(long = "U", default_value_t = 40)]
    pub tokens: usize,
    #[arg(long = "D", default_value_t = 512)]
    pub symbols: usize,
    #[arg(long, default_value_t = 0)]
    pub bl: usize,
    #[arg(long, default_value_t = 10)]
    pub br: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("ARTL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("ARTL_THREADS must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(CliError::Usage("ARTL_THREADS must be a positive integer, got 0".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Loss(a) => commands::loss(&a),
        Command::Align(a) => commands::align(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Endpoint(a) => commands::endpoint(&a),
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
