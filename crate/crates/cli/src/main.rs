//! `sdev`: datasets, training, sampling, Schedule Deviation and transport
//! distances from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. Failures are reported on stderr as one JSON object.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sdev", version, about = "Schedule Deviation of conditional diffusion flows")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SDEV_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetKind {
    ToyDiscrete,
    ToyContinuous,
    Maze,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a toy or maze dataset.
    GenDataset {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML overrides: toy keys (`anchors`, `noise_sigma`) or maze keys
        /// (`path_points`, `bezier_noise`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maze layout (`#` wall, `.` open, `G` goal); default: built-in.
        #[arg(long)]
        maze: Option<PathBuf>,
    },
    /// Train the conditional denoiser on a `(z, x)` dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML with optional `[arch]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the per-window mean loss as CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Draw terminal samples from a flow at one condition.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        z: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure Schedule Deviation of a flow at one condition.
    Sd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        z: f64,
        #[arg(long)]
        seed: u64,
        /// Per-time profile CSV.
        #[arg(long)]
        out: PathBuf,
        /// Use these samples (from `sample`) as the empirical oracle.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Exact 1-Wasserstein distance between two sample files.
    Ot {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Largest set size for the exact assignment in more than one dimension.
        #[arg(long, default_value_t = sdev_core::transport::DEFAULT_EMD_CAP)]
        cap: usize,
        /// JSON summary path (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scripted reproductions writing a CSV bundle and manifest.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Subcommand, Debug)]
enum Experiment {
    /// Samples and deviation profiles across z for guides and the trained net.
    Fig6 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Total deviation against sampler disagreement over a z grid.
    Correlate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 2); `key` is the offending key path.
    Config { message: String, key: Option<String> },
    Runtime(sdev_core::Error),
}

impl From<sdev_core::Error> for Failure {
    fn from(e: sdev_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure::Config {
            message: message.into(),
            key: None,
        }
    }

    fn report(&self) -> (u8, serde_json::Value) {
        match self {
            Failure::Config { message, key } => (2, json!({"error": "config", "message": message, "key": key})),
            Failure::Runtime(e) => {
                let kind = match e {
                    sdev_core::Error::MissingArtifact(_) => "missing-artifact",
                    sdev_core::Error::Io(_) => "io",
                    _ => "runtime",
                };
                (1, json!({"error": kind, "message": e.to_string()}))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads(cli.threads).and_then(|()| commands::run(cli.command)) {
        let (code, body) = f.report();
        eprintln!("{body}");
        return ExitCode::from(code);
    }
    ExitCode::SUCCESS
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    match threads {
        Some(0) => Err(Failure::config("--threads must be at least 1")),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot size the worker pool: {e}"))),
        _ => Ok(()),
    }
}
