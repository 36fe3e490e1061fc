use thiserror::Error;

use crate::algorithms::RunError;
use crate::data::DataError;
use crate::experiments::ConfigError;
use crate::objectives::ObjectiveError;
use crate::prox::SolverError;
use crate::sampling::SamplingError;
use crate::theory::TheoryError;

/// Crate-wide error, one variant per subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (solver stalls, divergence,
    /// non-converged Newton), as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Solver(e) => e.is_numeric(),
            Error::Theory(TheoryError::NotConverged { .. }) => true,
            Error::Run(e) => e.is_numeric(),
            Error::Objective(ObjectiveError::NotPositiveDefinite) => true,
            _ => false,
        }
    }

    /// True for invalid user input (config, sampling spec, data shape).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Sampling(_) | Error::Data(_) | Error::Json(_)
        ) || matches!(self, Error::Run(e) if !e.is_numeric())
            || matches!(self, Error::Solver(e) if !e.is_numeric())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
