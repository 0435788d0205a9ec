use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrapError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("defect parameter out of bounds: {name} = {value}")]
    OutOfBounds { name: &'static str, value: f64 },

    #[error("layout decomposition failed (residual {residual:.3e} m)")]
    DecompositionFailed { residual: f64 },

    #[error("model violation: {count} minima found, at most 3 expected")]
    ModelViolation { count: usize },

    #[error("field solver did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("no local minimum found in the search disk")]
    FlatField,

    #[error("pattern mismatch: {left} vs {right} points")]
    PatternMismatch { left: usize, right: usize },

    #[error("diagnosis failed (best residual {residual:.3e} m)")]
    DiagnosisFailed { residual: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TrapError {
    fn from(e: std::io::Error) -> Self {
        TrapError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TrapError>;
