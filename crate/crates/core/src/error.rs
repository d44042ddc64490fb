use thiserror::Error;

use crate::project::ProjectionReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("window boundary at fraction {fraction} is not on the fine grid ({fine_per_step} fine steps per step)")]
    WindowMisaligned { fraction: f64, fine_per_step: usize },

    #[error("projection did not converge after {} iterations (last delta {:.3e})", .report.iterations, .report.final_delta)]
    ProjectionNoConvergence { report: Box<ProjectionReport> },

    #[error("implicit solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverNoConvergence { iterations: usize, residual: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("path {path}, dt {dt}: {source}")]
    AtPath {
        path: u64,
        dt: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("coordinate transform singular: {0}")]
    TransformSingular(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn at_step(self, step: usize) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// True for failures of an iterative solve (exit code 1 in the CLI).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ProjectionNoConvergence { .. }
            | Error::SolverNoConvergence { .. }
            | Error::NonFinite(_)
            | Error::TransformSingular(_) => true,
            Error::AtStep { source, .. } | Error::AtPath { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
