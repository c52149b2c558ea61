use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CfrError> = std::result::Result<T, E>;

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum CfrError {
    #[error("io error on {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column '{column}': cannot parse '{value}'")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("sinkhorn kernel underflow: every entry of exp(-lambda * M) is zero at lambda = {lambda}; use a smaller entropy scale")]
    KernelUnderflow { lambda: f64 },
    #[error("sinkhorn scaling became non-finite at iteration {iteration}")]
    SinkhornDiverged { iteration: usize },
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },
    #[error("batching error: {0}")]
    Batching(String),
    #[error("missing forward cache: {0}")]
    MissingCache(String),
    #[error("ground truth missing: {0}")]
    MissingTruth(String),
    #[error("policy risk undefined: no sample agrees with the policy (matched count {matched})")]
    NoPolicyMatches { matched: usize },
    #[error("model file error: {0}")]
    ModelFormat(String),
}

impl CfrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfrError::Io { path: path.into(), error: source }
    }

    pub fn class(&self) -> ErrorClass {
        use CfrError::*;
        match self {
            Config(_) | Shape(_) | ModelFormat(_) | MissingCache(_) => ErrorClass::Config,
            Io { .. } | Csv(_) | Schema(_) | Parse { .. } | Validation(_) | Size(_)
            | Generation(_) | Batching(_) | MissingTruth(_) => ErrorClass::Data,
            Numeric(_) | KernelUnderflow { .. } | SinkhornDiverged { .. } | Diverged { .. }
            | NoPolicyMatches { .. } => ErrorClass::Numeric,
        }
    }
}
