use std::path::PathBuf;

use setemd::{DiffError, FewShotError, LpError, MetricError, RetrievalError, SynthError, TensorIoError};
use thiserror::Error;

/// Every failure maps onto one of two exit codes: bad input (1) or a
/// numerical breakdown such as divergence or a singular KKT system (2).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Validation(_) | CliError::Output { .. } => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<LpError> for CliError {
    fn from(e: LpError) -> Self {
        match e {
            LpError::CyclingDetected { .. } | LpError::MaxIterations { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::SingularKkt { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Lp(e) => e.into(),
            MetricError::Diff(e) => e.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FewShotError> for CliError {
    fn from(e: FewShotError) -> Self {
        match e {
            FewShotError::Divergence { .. } => CliError::Numerical(e.to_string()),
            FewShotError::Metric(e) => e.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Metric(e) => e.into(),
            RetrievalError::NonFinite(..) => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}
