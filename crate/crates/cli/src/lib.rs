//! The `dap` command-line tool.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod frames;
pub mod selftest;

/// Failure classes; each maps to one process exit code.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Args(String),
    Io(String),
    Shape(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Check(_) => 1,
            Failure::Args(_) => 2,
            Failure::Io(_) => 3,
            Failure::Shape(_) => 4,
            Failure::Numeric(_) => 5,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Args(m) => write!(f, "invalid arguments: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
            Failure::Shape(m) => write!(f, "shape or configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<dap_core::Error> for Failure {
    fn from(e: dap_core::Error) -> Self {
        use dap_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) | E::Format(_) => Failure::Io(msg),
            E::Numeric(_) => Failure::Numeric(msg),
            _ => Failure::Shape(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dap", version, about = "Online video super-resolution with a deformable attention pyramid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Super-resolve a directory of LR frames.
    Sr(SrArgs),
    /// Produce LR frames from HR frames.
    Degrade(DegradeArgs),
    /// PSNR/SSIM of predicted frames against ground truth.
    Metrics(MetricsArgs),
    /// Complexity table and measured runtime.
    Profile(ProfileArgs),
    /// Train on a directory of paired LR/HR sequences.
    TrainToy(TrainArgs),
    /// Write a synthetic translating-checkerboard dataset.
    Synth(SynthArgs),
    /// Histograms of dumped offsets.
    AnalyzeOffsets(AnalyzeArgs),
    /// PSNR curves with the hidden state reset at a fixed interval.
    Propagate(PropagateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Built-in consistency checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Weights file (`.dapw`).
    #[arg(long)]
    pub weights: PathBuf,
    /// Model configuration JSON; defaults to the weights file with a `.json`
    /// extension.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Forward,
    Reverse,
}

#[derive(Args, Debug)]
pub struct SrArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "forward")]
    pub mode: ModeArg,
    /// Reset the hidden state every N frames.
    #[arg(long)]
    pub reinit_every: Option<usize>,
    /// Write level-0 offsets of every frame here.
    #[arg(long)]
    pub dump_offsets: Option<PathBuf>,
    /// Appended to each input file stem.
    #[arg(long, default_value = "_sr")]
    pub suffix: String,
    /// Ground-truth HR frames; prints metrics of the written frames.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Score the unquantized outputs instead of the written 8-bit frames.
    #[arg(long)]
    pub float_metrics: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DegradeModeArg {
    Bd,
    Bi,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long, value_enum, default_value = "bd")]
    pub mode: DegradeModeArg,
    #[arg(long, default_value_t = 1.6)]
    pub sigma: f64,
    #[arg(long, default_value_t = 13)]
    pub ksize: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Y,
    Rgb,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value = "y")]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 0)]
    pub crop_border: usize,
    /// Also write the report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Per-frame `frame,psnr,ssim` table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Model configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Weights to time with; fresh random weights when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Free-form description of the machine, copied into the report.
    #[arg(long, default_value = "")]
    pub hw_note: String,
    #[arg(long, default_value_t = 180)]
    pub height: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Skip timing and report only the complexity table.
    #[arg(long)]
    pub no_timing: bool,
    /// Also time with the engine's internal parallelism.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of sequences, each with `lr/` and `hr/` frame folders.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Warm start from these weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// LR frame side.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Largest per-axis speed, HR pixels per frame.
    #[arg(long, default_value_t = 10.0)]
    pub max_speed: f64,
    #[arg(long, default_value_t = 16.0)]
    pub square_min: f64,
    #[arg(long, default_value_t = 32.0)]
    pub square_max: f64,
    /// Fixed velocity `dx,dy` in LR pixels per frame; writes one sequence.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub translate: Option<(f64, f64)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dumps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub magnitude_bins: usize,
    #[arg(long, default_value_t = 40.0)]
    pub magnitude_max: f64,
    #[arg(long, default_value_t = 81)]
    pub grid_bins: usize,
    #[arg(long, default_value_t = 40.0)]
    pub grid_extent: f64,
}

#[derive(Args, Debug)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub interval: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub float_metrics: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Op id, or `all`.
    #[arg(long, default_value = "all")]
    pub op: String,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also check the unrolled toy model.
    #[arg(long)]
    pub model: bool,
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `dx,dy`")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Worker threads from `DAP_THREADS`. The engine computes on one thread, so
/// every accepted value resolves to 1.
pub fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("DAP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|_| 1)
            .map_err(|_| Failure::Args(format!("DAP_THREADS must be a non-negative integer, got `{v}`"))),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match threads_from_env().and_then(|_| commands::dispatch(cli.command)) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("dap: {f}");
            f.exit_code()
        }
    }
}
