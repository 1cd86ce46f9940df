//! `pillar3d` batch front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 internal
//! invariant violation.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pillar3d::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "pillar3d", version, about = "Roadside LiDAR 3D detection pipeline")]
pub struct Cli {
    /// TOML config file; falls back to $PILLAR3D_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset into --out.
    Synth {
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
    /// Point-to-point ICP of --source onto --target; writes the transform as JSON.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Per-iteration objective and RMSE as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Remove the ground plane; writes the remaining points as PCD to --out.
    GroundRemove {
        #[arg(long)]
        input: PathBuf,
    },
    /// Pillarize a cloud and write a JSON summary.
    Pillarize {
        #[arg(long)]
        input: PathBuf,
    },
    /// Shape-aware plus global augmentation of one labeled frame into --out.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Detect objects; writes <stem>.csv and <stem>.json per frame into --out.
    Infer {
        /// PCD files.
        #[arg(long, num_args = 1.., required_unless_present = "manifest", conflicts_with = "manifest")]
        input: Vec<PathBuf>,
        /// Dataset manifest; its .pcd entries are processed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Weight manifest; seeded initialization when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Average precision of detection CSVs against OpenLABEL ground truth.
    Eval {
        /// Directory of <stem>.csv detections.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of <stem>.json labels.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Loss components of one frame's detections against its labels.
    LossAudit {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Teacher detections for the consistency term.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Per-stage inference timing as CSV.
    Bench {
        /// PCD file; a dense synthetic frame when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Timed runs after one warm-up; the run with the median total is reported.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Write seeded initial weights to --out.
    InitWeights,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

pub trait Classify<T> {
    fn data(self) -> Result<T, CliError>;
    fn internal(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { code: 2, source: e.into() })
    }

    fn internal(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { code: 3, source: e.into() })
    }
}

pub fn usage(msg: impl fmt::Display) -> CliError {
    CliError { code: 1, source: anyhow::anyhow!("{msg}") }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref()).data()?;
    if cli.dump_config {
        return commands::write_text(cli.out.as_deref(), &cfg.to_toml());
    }
    let Some(command) = &cli.command else {
        return Err(usage("no command given; see --help"));
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().internal()?;
    }
    commands::dispatch(command, &cli, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
