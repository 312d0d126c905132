//! File formats, configuration and the command-line front end for
//! [`dcan_core`].
//!
//! A run reads one JSON configuration and writes a fixed set of files into
//! its output directory: `config-echo.json`, `metrics.jsonl`,
//! `summary.json`, `model.ckpt` and `embeddings.csv`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;

pub use config::{DatasetConfig, DatasetKind, RunConfig};
pub use error::{CliError, Result};
