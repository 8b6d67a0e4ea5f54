use std::path::PathBuf;

use thiserror::Error;

use crate::types::VehicleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid time window [{t0}, {t1}]: end must be after start")]
    Window { t0: f64, t1: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("qp solver did not converge after {iterations} iterations (primal residual {primal:.3e}, dual residual {dual:.3e})")]
    SolverFailed { iterations: usize, primal: f64, dual: f64 },

    #[error("qp reported primal infeasibility for a problem that is feasible by construction")]
    SolverInfeasible,

    #[error("vehicle {0} is missing from the allocation plan")]
    MissingVehicle(VehicleId),

    #[error("invalid qp problem: {0}")]
    Problem(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
