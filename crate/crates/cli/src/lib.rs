//! Command-line driver: `synth`, `train`, `eval`, `ablate`, `export`,
//! `metrics` and `check-grads` over one experiment configuration.
//!
//! Exit codes: 0 success, 1 I/O error, 2 configuration error (including
//! refusing to overwrite), 3 data error, 4 numerical failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neuralign::zeroshot::AblationMode;
use neuralign::{Error, ErrorKind};

pub use config::ExperimentConfig;

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "neuralign", version, about = "Align M/EEG recordings with image and text embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Validate the configuration and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with oracle embedding tables.
    Synth,
    /// Train one alignment model per subject.
    Train {
        /// Continue from the last epoch checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many further epochs, keeping the checkpoint.
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Zero-shot retrieval and classification on the test split.
    Eval {
        /// Model file to evaluate instead of the trained one (single subject).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Temporal and spatial ablations.
    Ablate {
        /// Ablation modes; the configured ones when omitted.
        #[arg(long = "mode", value_parser = parse_mode)]
        modes: Vec<AblationMode>,
    },
    /// Fit the prior and Q-Former and write generator conditions.
    Export,
    /// Score generated images against references.
    Metrics(MetricsArgs),
    /// Compare analytic gradients with central finite differences.
    CheckGrads {
        /// Entries probed per parameter tensor.
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = neuralign::gradcheck::FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// `name=path` of a feature table keyed by file name; replaces the
    /// random-projection extractor of that name or adds a new one.
    #[arg(long = "extractor")]
    pub extractors: Vec<String>,
    /// Generations per reference in candidate directories.
    #[arg(long, default_value_t = neuralign::metrics::DEFAULT_CANDIDATES)]
    pub candidates: usize,
    /// Extractor that ranks candidates.
    #[arg(long)]
    pub rank_by: Option<String>,
    /// Row label in the table.
    #[arg(long, default_value = "neuralign")]
    pub label: String,
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    match s {
        "expanding" => Ok(AblationMode::Expanding),
        "sliding" => Ok(AblationMode::Sliding),
        "decreasing" => Ok(AblationMode::Decreasing),
        "spatial" => Ok(AblationMode::Spatial),
        other => Err(format!("unknown mode {other:?} (expanding, sliding, decreasing, spatial)")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed: max relative error {max:.3e} is not below {tolerance:.1e}")]
    Gradients { max: f64, tolerance: f64 },
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.kind() {
                ErrorKind::Io => EXIT_IO,
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            },
            Failure::Gradients { .. } => EXIT_NUMERICAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Loads the configuration, applies the global flags and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(cli.global.config.as_deref())?.with_seed(cli.global.seed);
    if let Some(out) = &cli.global.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    if matches!(cli.command, Command::Export) {
        cfg.validate_bridge()?;
    }
    if cli.global.dry_run {
        let text = toml::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        println!("# configuration is valid\n{text}");
        return Ok(());
    }
    let ctx = commands::Ctx {
        cfg,
        force: cli.global.force,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train { resume, halt_after } => commands::train(&ctx, resume, halt_after),
        Command::Eval { checkpoint } => commands::eval(&ctx, checkpoint.as_deref()),
        Command::Ablate { modes } => commands::ablate(&ctx, &modes),
        Command::Export => commands::export(&ctx),
        Command::Metrics(args) => commands::metrics(&ctx, &args),
        Command::CheckGrads { probes, step, tolerance } => commands::check_grads(&ctx, probes, step, tolerance),
    }
}
