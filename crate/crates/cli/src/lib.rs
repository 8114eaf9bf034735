//! Experiment runner and subcommand implementations behind the `homog` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod experiments;
pub mod manifest;
pub mod table;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Run(String),
    #[error(transparent)]
    Model(#[from] homog_core::ModelError),
    #[error(transparent)]
    Sampling(#[from] homog_core::sampling::SamplingError),
    #[error(transparent)]
    Geometry(#[from] homog_core::geometry::GeometryError),
    #[error(transparent)]
    Energy(#[from] homog_core::energy::EnergyError),
    #[error(transparent)]
    CellProblem(#[from] homog_core::cell_problem::CellProblemError),
    #[error(transparent)]
    Percolation(#[from] homog_core::percolation::PercolationError),
    #[error(transparent)]
    CoarseGrain(#[from] homog_core::coarse_grain::CoarseGrainError),
    #[error(transparent)]
    Format(#[from] homog_core::io::IoError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
