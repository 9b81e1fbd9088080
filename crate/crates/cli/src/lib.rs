//! Command-line driver for the horizon-stratified mortality pipeline.
//!
//! Each subcommand is one stage; `run` executes all of them in order. Stages
//! communicate only through files in the output directory, and every stage
//! records content hashes in `manifest.json` there.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod svg;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use icurisk::Error;

use crate::config::{RunConfig, OUTPUT_ENV};
use crate::stages::Context;

#[derive(Debug, Parser)]
#[command(name = "icurisk", version, about = "Horizon-stratified ICU mortality risk pipeline")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set pipeline.model.rounds=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; falls back to the config, then $ICURISK_OUTPUT_ROOT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (and a shifted external one).
    Generate,
    /// Select the stay universe, split it, and build imputed matrices.
    Prepare,
    /// Cross-validated grid search per horizon.
    Tune,
    /// Fit the boosted model and the logistic baseline per horizon.
    Train,
    /// Test-set metrics, subgroups, and temporal consistency.
    Evaluate,
    /// Shapley rankings, attributions, and the noise-column test.
    Explain,
    /// Decision and clinical impact curves.
    Curves,
    /// Retrain on top-ranked columns and score the external cohort.
    External,
    /// Aggregate stage outputs into one document.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

impl Command {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Command::Generate => "generate",
            Command::Prepare => "prepare",
            Command::Tune => "tune",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::Curves => "curves",
            Command::External => "external",
            Command::Report => "report",
            Command::Run | Command::Config => return None,
        })
    }
}

/// An error tagged with the command that raised it.
#[derive(Debug)]
pub struct Failure {
    pub command: String,
    pub error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.command, self.error)
    }
}

impl std::error::Error for Failure {}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig { .. } => 2,
        Error::Schema { .. } | Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Precondition(_) => 5,
    }
}

fn execute(cli: &Cli, cfg: RunConfig) -> icurisk::Result<()> {
    if cli.command == Command::Config {
        let text = toml::to_string(&cfg).map_err(|e| Error::Data(e.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    let out = cfg.output_dir(cli.out.as_deref());
    let ctx = Context::new(cfg, out);
    match cli.command.stage() {
        Some(s) => ctx.run(s),
        None => ctx.run_all(),
    }
}

pub fn run_cli(cli: &Cli) -> Result<(), Failure> {
    let name = format!("{:?}", cli.command).to_lowercase();
    let fail = |error| Failure { command: name.clone(), error };
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(fail)?;
    let threads = match cli.jobs {
        Some(0) => {
            return Err(fail(Error::InvalidConfig { field: "--jobs".into(), reason: "must be at least 1".into() }));
        }
        Some(n) => n,
        None => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| fail(Error::InvalidConfig { field: "--jobs".into(), reason: e.to_string() }))?;
    pool.install(|| execute(cli, cfg)).map_err(fail)
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_cli(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            if matches!(f.error, Error::Precondition(_)) && std::env::var_os(OUTPUT_ENV).is_none() && cli.out.is_none() {
                eprintln!("hint: pass --out or set {OUTPUT_ENV} to choose the output directory");
            }
            exit_code(&f.error)
        }
    }
}
