//! Pipeline stages behind the `af-horizon` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sources;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Format, RunConfig};
pub use pipeline::{run, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
