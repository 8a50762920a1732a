//! Command-line front end.
//!
//! Every subcommand reads one TOML configuration and operates on the run
//! directory it names. Exit codes: 0 success, 2 configuration error,
//! 3 missing upstream artifact, 4 numerical failure.

use crate::error::Result;
use crate::harness::stages::{cmd_all, run_stage, Workspace};
use crate::harness::ExperimentConfig;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "shap-aft",
    about = "Shapley-guided adversarial defense experiments for modulation classification",
    version
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Redo stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled IQ corpus.
    GenData,
    /// Train the modulation classifier.
    TrainAmc,
    /// Train the attack detector on a mixed clean/attacked corpus.
    TrainDetector,
    /// Generate attacked evaluation sets over the configured grid.
    Attack,
    /// Compute attributions, destructive positions, and consistency
    /// matrices.
    Explain,
    /// Run the defense comparison (baseline, smoothing, adversarial
    /// training, ablation, full pipeline).
    Defend,
    /// Render CSV tables and SVG figures from result files.
    Report,
    /// Run every stage in order.
    All {
        /// Comma-separated subset of stages to run.
        #[arg(long)]
        stage_filter: Option<String>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        crate::error::Error::Config("--config PATH is required".into())
    })?;
    let cfg = ExperimentConfig::load(&config_path, cli.seed)?;
    let hash = cfg.config_hash();
    let mut ws = Workspace::open(std::path::Path::new(&cfg.output_dir), &hash, cli.force)?;
    match cli.command {
        Command::GenData => run_stage("gen-data", &cfg, &mut ws, cli.force),
        Command::TrainAmc => run_stage("train-amc", &cfg, &mut ws, cli.force),
        Command::TrainDetector => run_stage("train-detector", &cfg, &mut ws, cli.force),
        Command::Attack => run_stage("attack", &cfg, &mut ws, cli.force),
        Command::Explain => run_stage("explain", &cfg, &mut ws, cli.force),
        Command::Defend => run_stage("defend", &cfg, &mut ws, cli.force),
        Command::Report => run_stage("report", &cfg, &mut ws, cli.force),
        Command::All { stage_filter } => cmd_all(&cfg, &mut ws, cli.force, stage_filter.as_deref()),
    }
}

/// Run with the given arguments (argv[0] included); returns the exit code.
pub fn run_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    run_args(std::env::args_os())
}
