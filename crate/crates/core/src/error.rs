use thiserror::Error;

use crate::grid::DcCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("{dc} is outside the {rows}x{cols} dose grid")]
    OffGrid { dc: DcCoord, rows: u32, cols: u32 },

    #[error("invalid escalation path: {0}")]
    InvalidPath(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("trial has stopped")]
    TrialStopped,

    #[error("{0} has been excluded and cannot receive patients")]
    ExcludedDc(DcCoord),

    #[error("enrolling {requested} more patients would exceed the cap of {max_n} (enrolled {enrolled})")]
    SampleSizeExceeded {
        enrolled: u32,
        requested: u32,
        max_n: u32,
    },

    #[error("state integrity: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
