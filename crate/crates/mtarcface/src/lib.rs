//! Masked-face recognition training pipeline.
//!
//! The crate covers the full desk-scale loop: synthetic mask augmentation
//! ([`maskgen`]), seeded dual-dataset sampling ([`sampler`]), a dual-head
//! embedding network with an additive angular margin ([`model`]), the
//! combined identity+mask objective ([`loss`]), SGD training ([`trainer`]),
//! and pair-verification / mask-usage evaluation ([`evalkit`]).
//!
//! Everything downstream of a seed is deterministic: augmentation, sampling,
//! initialization, and dropout all draw from per-key ChaCha streams, so a
//! single-threaded run is a pure function of its config and input datasets.

pub mod cli;
pub mod datamodel;
pub mod evalkit;
pub mod fixture;
pub mod loss;
pub mod maskgen;
pub mod model;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod trainer;

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("pairs file {path}, line {line}: {msg}")]
    PairsFormat {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Mask polygon degenerate after clamping to the image bounds.
    #[error("mask geometry invalid: {0}")]
    MaskGeometryInvalid(String),

    /// Original and masked datasets are not exact filename mirrors.
    #[error("twin datasets mismatch: {0}")]
    TwinMismatch(String),

    /// An embedding with zero norm cannot be normalized.
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    /// A vector expected to be unit-norm deviates beyond tolerance.
    #[error("vector not normalized: norm {0}")]
    NotNormalized(f64),

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("invalid loss term: {0}")]
    InvalidLossTerm(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 1 for usage/config errors,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
