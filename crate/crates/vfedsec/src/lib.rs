//! Dropout-tolerant vertical federated learning simulator.
//!
//! The library models a split-learning deployment where clients are organized
//! into feature groups, embeddings and model updates travel as fixed-point
//! residues masked by pairwise-cancelling noise, and the server can keep
//! training when whole groups drop out by zero-padding their embedding
//! columns after batch normalization.
//!
//! Modules follow the protocol's layering:
//! - [`qcode`]: fixed-point quantization and the 32-bit residue matrices.
//! - [`secure_layer`]: key agreement, antisymmetric noise streams, masking,
//!   and the sealed sample-id channel.
//! - [`neuralnet`]: dense layers, batch normalization with column masking,
//!   losses, SGD, and classification metrics.
//! - [`protocol`]: the round state machine tying participants together.
//! - [`datahub`]: CSV ingestion, vertical partitioning, and synthetic data.
//! - [`simharness`]: dropout injection, the overhead ledger, and the
//!   training driver.
//! - [`config`] and [`cli`]: run configuration and the command-line front end.

pub mod cli;
pub mod config;
pub mod datahub;
pub mod neuralnet;
pub mod protocol;
pub mod qcode;
pub mod secure_layer;
pub mod simharness;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("incomplete pool")]
    IncompletePool,
    #[error("no surviving segments")]
    NoSurvivingSegments,
    #[error("authentication failure")]
    AuthFailure,
    #[error("malformed public element")]
    MalformedPublic,
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch { expected: expected.into(), got: got.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
