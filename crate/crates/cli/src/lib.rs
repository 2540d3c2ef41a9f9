//! The `dissent` command-line pipeline.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
pub mod config;
pub mod error;
pub mod provider;
pub mod run;

pub use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "dissent", version, about = "Demographic-aware modeling of annotator disagreement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML configuration file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset preset supplying the hyperparameters
    #[arg(long)]
    preset: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. --set optimizer.max_epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and normalize a corpus
    Ingest(Common),
    /// Dataset statistics
    Stats(Common),
    /// Instance-level train/dev/test split
    Split(Common),
    /// Train the mixture-of-experts model
    Train(Common),
    /// Score a checkpoint against baselines
    Evaluate(Common),
    /// Expert routing and specialization analysis
    AnalyzeExperts(Common),
    /// Generate persona-conditioned synthetic annotations
    GenerateSynthetic(Common),
    /// Train on real plus synthetic annotations
    BlendTrain(Common),
    /// Collate results across runs
    Report(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Ingest(c) => ("ingest", c),
            Command::Stats(c) => ("stats", c),
            Command::Split(c) => ("split", c),
            Command::Train(c) => ("train", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::AnalyzeExperts(c) => ("analyze-experts", c),
            Command::GenerateSynthetic(c) => ("generate-synthetic", c),
            Command::BlendTrain(c) => ("blend-train", c),
            Command::Report(c) => ("report", c),
        }
    }
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in config::COMMANDS {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(config::keys_help(name)));
    }
    cmd
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let (name, common) = cli.command.parts();
    let overrides = config::Overrides {
        preset: common.preset.clone(),
        seed: common.seed,
        out: common.out.clone(),
        set: common.set.clone(),
    };
    let (run, outcome) = match config::resolve(name, common.config.as_deref(), &overrides) {
        Ok(resolved) => {
            let cfg = resolved.config;
            let mut run = run::Run::new(name, cfg.output.dir.clone());
            run.set_config(serde_json::to_value(&cfg).unwrap_or_default());
            run.set_seed(cfg.seed);
            let outcome = commands::dispatch(name, &cfg, &mut run);
            (run, outcome)
        }
        Err(e) => {
            let dir = common.out.clone().unwrap_or_else(|| config::OutputConfig::default().dir);
            (run::Run::new(name, dir), Err(e))
        }
    };
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    let code = outcome.as_ref().err().map_or(0, CliError::exit_code);
    match run.finish(&outcome) {
        Ok(_) => code,
        Err(e) => {
            eprintln!("error: cannot write the run manifest: {e}");
            if code == 0 { e.exit_code() } else { code }
        }
    }
}
