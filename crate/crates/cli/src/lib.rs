//! `figura`: forge data, train the sketch, portray and segmentation models,
//! sample, walk the latent space and evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed inputs, I/O), 3 numerical failure.

pub mod config;
mod eval;
mod output;
mod sample;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use eval::cross_matrix;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<figura_core::Error> for CliError {
    fn from(e: figura_core::Error) -> Self {
        match e {
            figura_core::Error::NonFinite(_) => CliError::Numerical(e.to_string()),
            figura_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "figura", version, about = "Generative model of segmented figures")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.vae.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedurally generated dataset.
    Forge {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on a dataset directory.
    Train(TrainArgs),
    /// Generate sketches and images from trained models.
    Sample(SampleArgs),
    /// Decode a walk along a principal direction of the latent space.
    Walk(WalkArgs),
    /// Reconstruction metrics, label comparisons, or the cross matrix.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Module {
    Vae,
    Cvae,
    Portray,
    Segmenter,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub module: Module,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt` up to the configured epoch count.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Portray only: `color-map` or `probability-map`.
    #[arg(long)]
    pub input_mode: Option<InputModeArg>,
    /// Portray only: condition on per-segment colors.
    #[arg(long)]
    pub color_conditioning: bool,
    /// Portray only: adversarial weight (0 = pure L1).
    #[arg(long)]
    pub lambda_adv: Option<f32>,
    /// Portray only: drop the generator's skip connections.
    #[arg(long)]
    pub no_skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputModeArg {
    ColorMap,
    ProbabilityMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    /// Sketches from the VAE prior.
    Unconditional,
    /// Sketches from the CVAE for one body silhouette.
    Pose,
    /// Sketch → portray → background, end to end.
    Full,
    /// One sketch portrayed with several requested color sets.
    Color,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    pub mode: SampleMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub cvae: Option<PathBuf>,
    #[arg(long)]
    pub portray: Option<PathBuf>,
    /// Indexed silhouette PNG (as written by `forge`).
    #[arg(long)]
    pub silhouette: Option<PathBuf>,
    /// Use the silhouette of the forged sample with this seed.
    #[arg(long)]
    pub pose_seed: Option<u64>,
    /// Color mode: indexed label PNG to portray.
    #[arg(long)]
    pub sketch: Option<PathBuf>,
    /// Color mode: JSON list of `{class-name: [r, g, b]}` maps, values in [0, 1].
    #[arg(long)]
    pub colors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WalkArgs {
    #[arg(long)]
    pub vae: PathBuf,
    /// Dataset whose label maps form the latent corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub extent: Option<f64>,
    #[arg(long)]
    pub component: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Per-class metrics of a sketch model's reconstructions.
    Reconstruction {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class metrics between the label maps of two datasets.
    Compare {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter per data source and score each on every source.
    Cross {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        portray: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse arguments and run; errors are printed to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("figura: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Forge { out, count, seed } => {
            if let Some(c) = count {
                cfg.data.count = c;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            train::forge(&cfg, &out)
        }
        Command::Train(args) => train::train(cfg, args),
        Command::Sample(args) => sample::sample(cfg, args),
        Command::Walk(args) => eval::walk(cfg, args),
        Command::Eval { what } => eval::eval(cfg, what),
    }
}
