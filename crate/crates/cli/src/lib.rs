//! Command-line driver: data generation, codec fitting, training,
//! forecasting, ablation sweeps, verification and metrics.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY_FAILED};
pub use pipeline::{Pipeline, Stage};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BRIDGEFLOW_OUT";
pub const DEFAULT_OUT: &str = "bridgeflow-out";

#[derive(Debug, Parser)]
#[command(name = "bridgeflow", version, about = "Flow-matching forecasts of dynamical systems in latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=5e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory, overriding the config and $BRIDGEFLOW_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the train and test corpora.
    GenData,
    /// Fit the linear codec on the normalized training states.
    FitCodec,
    /// Train the vector-field model, writing checkpoints and the loss curve.
    Train,
    /// Roll out forecasts on the test corpus.
    Forecast,
    /// Retrain per bridge sigma and forecast with every scheme and step count.
    Sweep,
    /// Run the numerical checks; exits 3 if any check fails.
    Verify,
    /// Recompute forecast metrics from the stored ensemble.
    Metrics,
}

impl Command {
    pub fn stage(self) -> Stage {
        match self {
            Command::GenData => Stage::Data,
            Command::FitCodec => Stage::Codec,
            Command::Train => Stage::Train,
            Command::Forecast => Stage::Forecast,
            Command::Sweep => Stage::Sweep,
            Command::Verify => Stage::Verify,
            Command::Metrics => Stage::Metrics,
        }
    }
}

impl Cli {
    /// Resolved configuration with the `--seed` override applied.
    pub fn load_config(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }

    pub fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn execute(&self) -> CliResult<()> {
        let cfg = self.load_config()?;
        if matches!(self.command, Command::Forecast | Command::Metrics) {
            cfg.require_flow_loss()?;
        }
        if self.command == Command::Sweep {
            cfg.validate_sweep()?;
        }
        let dir = self.output_dir(&cfg);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = self.jobs {
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be >= 1".into()));
            }
            builder = builder.num_threads(jobs);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", self.jobs.unwrap_or(0))))?;
        pool.install(|| {
            let mut pipeline = Pipeline::new(cfg, dir)?;
            pipeline.run(self.command.stage())
        })
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.execute() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
