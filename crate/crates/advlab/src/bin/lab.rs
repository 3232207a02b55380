//! Thin command-line front end for the experiment harness.
//!
//! ```text
//! lab data|pretrain|train|attack|evaluate|lnsr|all --config <path> [--out <dir>] [--seed <n>] [--force]
//! ```
//!
//! Exit codes: 0 success, 1 usage/config error, 2 missing upstream
//! stage, 3 numerical failure. `LAB_THREADS` caps worker threads.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advlab::harness::{ExperimentConfig, Lab};
use advlab::{LabError, Result};

#[derive(Parser)]
#[command(
    name = "lab",
    version,
    about = "Desk-scale adversarial-robustness laboratory for spectrogram anti-spoofing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the labeled splits and the unlabeled corpus
    Data(StageArgs),
    /// Pre-train the encoder with masked-prediction reconstruction
    Pretrain(StageArgs),
    /// Train the attacking models and the defender suite
    Train(StageArgs),
    /// Craft adversarial pairs for every (model, algorithm, ε) cell
    Attack(StageArgs),
    /// Score all defenders on the stored pairs and write curves.csv
    Evaluate(StageArgs),
    /// Compare layer-wise noise attenuation and write lnsr.csv
    Lnsr(StageArgs),
    /// Run every stage in order, skipping up-to-date ones
    All(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (JSON; `{}` runs the default experiment)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run stages even when their artifacts are up to date; also
    /// discards a manifest written under a different configuration
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        return ExitCode::from(err.exit_code() as u8);
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    let (args, stage): (&StageArgs, _) = match &cli.command {
        Command::Data(a) => (a, "data"),
        Command::Pretrain(a) => (a, "pretrain"),
        Command::Train(a) => (a, "train"),
        Command::Attack(a) => (a, "attack"),
        Command::Evaluate(a) => (a, "evaluate"),
        Command::Lnsr(a) => (a, "lnsr"),
        Command::All(a) => (a, "all"),
    };
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let mut lab = Lab::open(&config, args.force)?;
    match stage {
        "data" => lab.data().map(drop),
        "pretrain" => lab.pretrain().map(drop),
        "train" => lab.train().map(drop),
        "attack" => lab.attack().map(drop),
        "evaluate" => lab.evaluate().map(drop),
        "lnsr" => lab.lnsr().map(drop),
        _ => lab.all(),
    }
}

/// Honour LAB_THREADS by capping the global worker pool.
fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| LabError::Config(format!("LAB_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| LabError::Config(format!("failed to build thread pool: {e}")))
}
