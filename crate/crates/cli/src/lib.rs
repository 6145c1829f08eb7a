//! `coldstart` command-line pipeline: ingest → split → bpmf-train → train →
//! eval / report, plus `interview` and `serve` for trained bundles.

pub mod commands;
pub mod config;
pub mod interactive;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coldstart_core::eval::Averaging;
use coldstart_core::{ModelKind, PolicyKind};

#[derive(Debug, Parser)]
#[command(
    name = "coldstart",
    version,
    about = "Learned cold-start interviews for movie recommendation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory with `ratings.dat` and `movies.dat`.
    #[arg(long, global = true, env = "COLDSTART_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Artifact directory (overrides `work_dir`).
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    QEmbedding,
    QRating,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::QEmbedding => ModelKind::QEmbedding,
            ModelArg::QRating => ModelKind::QRating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Dqn,
    Random,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Dqn => PolicyKind::Dqn,
            PolicyArg::Random => PolicyKind::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse MovieLens `ratings.dat` / `movies.dat` into the dataset cache.
    Ingest {
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        movies: Option<PathBuf>,
        /// Keep a seeded random fraction of users, e.g. 0.1.
        #[arg(long)]
        user_sample: Option<f64>,
    },
    /// Write a synthetic corpus in MovieLens format (see `[synthetic]`).
    Synth {
        /// Output directory (default: `<work_dir>/synthetic-data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition users and movies into train/test and interview/test sets.
    Split,
    /// Fit BPMF factors on the training users.
    BpmfTrain,
    /// Train a DQN interview policy and its head.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        questions: Option<usize>,
        /// Continue an interrupted run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a bundle on the test users.
    Eval {
        /// Model bundle (default: best bundle of the latest run).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Interview length (default: the length the bundle was trained with).
        #[arg(long)]
        questions: Option<usize>,
        #[arg(long, value_enum, default_value = "micro")]
        averaging: AveragingArg,
        /// Number of sample interviews to include.
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Answer interview questions on the terminal, then print recommendations.
    Interview {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        questions: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Serve the HTTP interview API.
    Serve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Export the per-epoch RMSE series and sample interviews of a run.
    Report {
        /// Run directory (default: the latest run).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
}

/// Text appended to `--help`: every configuration key with its default.
pub fn config_help() -> String {
    let mut s = String::from("Configuration keys (TOML, with defaults):\n");
    for line in config::documented_keys() {
        s.push_str("  ");
        s.push_str(&line);
        s.push('\n');
    }
    s
}
