//! `dtgen`: run the dataset pipeline stage by stage against one config
//! file and one storage root.
//!
//! ```text
//! dtgen init <dir>
//! dtgen ingest real.csv
//! dtgen finetune
//! dtgen generate --n 3600
//! dtgen filter
//! dtgen export --task three-class
//! dtgen eval --pred predictions.csv
//! dtgen report
//! ```
//!
//! Exit codes: 0 success, 1 validation, 2 backend, 3 partial success.

pub mod config;
mod lock;
mod stages;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dtgen_core::filter::ThresholdRule;
use dtgen_core::Task;

pub use lock::RootLock;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Validation(anyhow::Error),
    #[error("{0:#}")]
    Backend(anyhow::Error),
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Partial(_) => 3,
        }
    }

    pub fn backend(e: impl Into<anyhow::Error>) -> Self {
        CliError::Backend(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Validation(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtgen", version, about = "Synthetic tableware-dirt dataset pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = config::CONFIG_FILE)]
    pub config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the backend base URL.
    #[arg(long, global = true, env = "DTGEN_ENDPOINT")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config and the default prompt template into a directory.
    Init {
        dir: PathBuf,
        /// Overwrite an existing config and template.
        #[arg(long)]
        force: bool,
    },
    /// Add labelled real images from a CSV with columns
    /// path,label[,split][,slots|caption].
    Ingest {
        csv: PathBuf,
        /// Label space of the CSV's labels.
        #[arg(long, default_value = "binary")]
        task: Task,
        /// Ingest even if this CSV was already ingested.
        #[arg(long)]
        force: bool,
    },
    /// Submit an adapter fine-tune job over the real training images.
    Finetune {
        /// Train a new adapter even if one exists.
        #[arg(long)]
        force: bool,
    },
    /// Sample prompts, generate images and add them to the synthetic set.
    Generate {
        /// Images to generate [default: generation.n].
        #[arg(long)]
        n: Option<usize>,
        /// Regenerate requests that are already stored.
        #[arg(long)]
        force: bool,
    },
    /// Score image-prompt alignment and select samples.
    Filter {
        /// Threshold width in standard deviations [default: filter.alpha].
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        /// lower-tail or upper-tail [default: filter.rule].
        #[arg(long)]
        rule: Option<ThresholdRule>,
        /// Rescore even if the config and samples are unchanged.
        #[arg(long)]
        force: bool,
    },
    /// Write the selected samples as a class-per-directory bundle.
    Export {
        /// Label space of the bundle.
        #[arg(long, default_value = "three-class")]
        task: Task,
        /// Rewrite the bundle even if it is current.
        #[arg(long)]
        force: bool,
    },
    /// Compute metrics from a sample_id,true_label,predicted_label CSV.
    Eval {
        /// Prediction CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Label space of the predictions.
        #[arg(long, default_value = "binary")]
        task: Task,
        /// Row name in the comparison table.
        #[arg(long, default_value = "DTGen")]
        scheme: String,
    },
    /// Summarize the store.
    Report {
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Serve the mock backend over the HTTP contract.
    MockServer {
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:8700")]
        listen: SocketAddr,
        /// Directory for images too large to send inline.
        #[arg(long)]
        blob_dir: Option<PathBuf>,
    },
}

/// Run one command to completion.
pub fn run(cli: Cli) -> Result<(), CliError> {
    stages::dispatch(cli)
}
