//! The `femdiff` command line: `mesh`, `gen-data`, `train`, `sample`, `posterior`, `eval`.
//!
//! Every command writes `run.json` into its output directory with the resolved
//! configuration, its hash, the seed, the crate version and the command arguments. Failures
//! exit nonzero and print a JSON error record on stderr.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use commands::{build_geometry, build_mesh, read_field_dir, run};
pub use config::{Method, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "femdiff", version, about = "Function-space diffusion on triangulated domains")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct GlobalArgs {
    /// Configuration file with `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for chains, samples and batches (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Extra `section.key=value` overrides, applied after the file. Give them before the command.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DenoiserArgs {
    /// Trained network checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the analytic Gaussian denoiser instead of a network.
    #[arg(long)]
    pub oracle: bool,
    /// Dataset whose training split defines the oracle's Gaussian prior (default `N(0, C)`).
    #[arg(long, requires = "oracle")]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Subcommand, Serialize)]
pub enum Command {
    /// Build the mesh and hierarchy; writes `mesh.txt` and `hierarchy.json`.
    Mesh,
    /// Generate a Gaussian-blob dataset into the output directory.
    GenData,
    /// Train the score network; writes `model.ckpt` and `loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Unconditional Heun samples into `samples/`.
    Sample {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Posterior samples for one observation into `ensemble/`.
    Posterior {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        /// Observation file (`sensors M` or `poisson PATH`).
        #[arg(long, required_unless_present = "truth")]
        observation: Option<PathBuf>,
        /// Ground-truth field to observe at `--sensors` random nodes instead of a file.
        #[arg(long, requires = "sensors", conflicts_with = "observation")]
        truth: Option<PathBuf>,
        #[arg(long)]
        sensors: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Metric report (`report.jsonl`) and CSV tables.
    Eval {
        /// Posterior ensemble directories, paired in order with `--truth`.
        #[arg(long)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        truth: Vec<PathBuf>,
        /// Sample directory compared against `--reference` by MMD.
        #[arg(long, requires = "reference")]
        samples: Option<PathBuf>,
        /// Field directory or dataset (its test split).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Also score `N(0, C)` noise against the reference.
        #[arg(long)]
        noise_baseline: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Mesh => "mesh",
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Posterior { .. } => "posterior",
            Command::Eval { .. } => "eval",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration ({} problems)", .0.len())]
    Config(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Fem(#[from] crate::fem::FemError),
    #[error(transparent)]
    RandField(#[from] crate::randfield::RandFieldError),
    #[error(transparent)]
    Score(#[from] crate::score::ScoreError),
    #[error(transparent)]
    Sde(#[from] crate::sde::SdeError),
    #[error(transparent)]
    Guidance(#[from] crate::guidance::GuidanceError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub details: Vec<String>,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Mesh(_) => "mesh",
            CliError::Fem(_) => "fem",
            CliError::RandField(_) => "randfield",
            CliError::Score(_) => "score",
            CliError::Sde(_) => "sde",
            CliError::Guidance(_) => "guidance",
            CliError::Data(_) => "data",
            CliError::Metrics(_) => "metrics",
            CliError::Field(_) => "field",
            CliError::Json(_) => "json",
            CliError::Io(_) => "io",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            details: match self {
                CliError::Config(list) => list.clone(),
                _ => Vec::new(),
            },
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code. Errors are printed to
/// stderr as one JSON object.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let rec = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind()));
            eprintln!("{rec}");
            1
        }
    }
}
