use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampling violation: {points} points cannot resolve wavenumber cutoff {k_cut} (need more than {required})")]
    Sampling {
        points: usize,
        k_cut: usize,
        required: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("transfer-matrix overflow at slice {slice}; reduce qr_period (currently {qr_period})")]
    Overflow { slice: usize, qr_period: usize },

    #[error("time step {dt} exceeds the stability limit {limit}")]
    TimeStep { dt: f64, limit: f64 },

    #[error("norm drift {drift:e} at t = {time}")]
    NormDrift { drift: f64, time: f64 },

    #[error("no crossing: {0}")]
    NoCrossing(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("{0}")]
    Numerical(String),

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures that come from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::NormDrift { .. }
                | Error::NoCrossing(_)
                | Error::DegenerateFit(_)
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
