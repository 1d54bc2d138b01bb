use thiserror::Error;

/// Errors raised by the simulation and certification pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid history: {0}")]
    InvalidHistory(String),

    #[error("θ = {theta} is outside the history window [-{span}, 0]")]
    OutOfRange { theta: f64, span: f64 },

    #[error("shift h = {h} must satisfy 0 <= h < span = {span}")]
    ShiftTooLarge { h: f64, span: f64 },

    #[error("{what} = {value} is not a multiple of the grid step {grid_step}")]
    OffGrid {
        what: &'static str,
        value: f64,
        grid_step: f64,
    },

    #[error("invalid disturbance signal: {0}")]
    InvalidSignal(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("missing {0}")]
    Missing(&'static str),

    #[error("discontinuity at t = {t} is not aligned with the integration grid")]
    MisalignedDiscontinuity { t: f64 },

    #[error("trajectory blew up near t = {t}")]
    BlowUp { t: f64 },

    #[error("construction invalid: {0}")]
    ConstructionInvalid(String),

    #[error("solution left its domain at t = {t}")]
    Domain { t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
