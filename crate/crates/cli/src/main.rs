mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use diffsigma::train::DEFAULT_SEED;

#[derive(Parser, Debug, Serialize)]
#[command(name = "diffsigma", version, about = "Gaussian noise-level estimation from noisy frame pairs")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// Worker threads (falls back to DIFFSIGMA_THREADS, then all cores).
    #[arg(long, global = true, env = "DIFFSIGMA_THREADS")]
    pub threads: Option<usize>,

    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case", tag = "command")]
pub enum Command {
    /// Write a noisy frame pair and a JSON sidecar for every clean image.
    Synth(SynthArgs),
    /// Train a network on difference patches.
    Train(TrainArgs),
    /// Estimate σ from two frames with a trained regression model.
    Estimate(EstimateArgs),
    /// Estimate σ with a classical method.
    Baseline(BaselineArgs),
    /// Error table per dataset, σ and method.
    Evaluate(EvaluateArgs),
    /// Per-image estimation time per dataset and method.
    Bench(BenchArgs),
    /// Finite-difference check of every layer and the micro network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Directory of clean images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    /// Clamp noisy frames to [0, 255].
    #[arg(long)]
    pub clip: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArg {
    Reg,
    Cls,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetArg {
    Micro,
    Paper,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadArg::Reg)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = PresetArg::Micro)]
    pub preset: PresetArg,
    /// 2000 training / 500 validation samples per level, 30 epochs, 64 px patches.
    #[arg(long)]
    pub paper_scale: bool,
    /// Model output path.
    #[arg(long, default_value = "model.dsqz")]
    pub out: PathBuf,
    /// History CSV path (default: next to the model).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples_per_level: Option<usize>,
    #[arg(long)]
    pub validation_per_level: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long, value_parser = parse_levels)]
    pub levels: Option<Levels>,
    /// 1 trains on luma, 3 on RGB differences.
    #[arg(
        long,
        default_value = "1",
        value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]).map(|s| s.parse::<usize>().unwrap())
    )]
    pub channels: usize,
    #[arg(long)]
    pub clip: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub f1: PathBuf,
    #[arg(long)]
    pub f2: PathBuf,
    /// Patches averaged per channel.
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_CNN_PATCHES)]
    pub patches: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Direct,
    Mad,
    Patchmin,
    Cnn,
}

#[derive(Args, Debug, Serialize)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub f1: PathBuf,
    /// Second frame; required by the difference-based methods.
    #[arg(long, required_if_eq_any = [("method", "direct"), ("method", "mad")])]
    pub f2: Option<PathBuf>,
    /// Tile size of the patch-minimum baseline.
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_PATCH_MIN_SIZE)]
    pub patch: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Text,
    Csv,
    Json,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Dataset directory; repeat for several datasets.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_parser = parse_levels, default_value = "5,10,15,20,25")]
    pub levels: Levels,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated; default: direct,mad,patchmin plus cnn when a model is given.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Vec<MethodArg>,
    #[arg(long)]
    pub clip: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_CNN_PATCHES)]
    pub patches: usize,
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_PATCH_MIN_SIZE)]
    pub patch: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_CNN_PATCHES)]
    pub patches: usize,
    #[arg(long, default_value_t = diffsigma::eval::DEFAULT_PATCH_MIN_SIZE)]
    pub patch: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = diffsigma::verify::SUITE_TOLERANCE)]
    pub tolerance: f64,
}

/// Comma-separated noise levels.
#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
pub struct Levels(pub Vec<f64>);

fn parse_levels(s: &str) -> Result<Levels, String> {
    let levels = s
        .split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| format!("invalid noise level {t:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if levels.is_empty() {
        return Err("no noise levels given".into());
    }
    Ok(Levels(levels))
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(diffsigma::Error),
}

impl From<diffsigma::Error> for CliError {
    fn from(e: diffsigma::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
