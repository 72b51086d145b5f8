use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("band limit (lmax={lmax}, mmax={mmax}) not representable on a {nlat}x{nlon} grid")]
    BandLimit {
        lmax: usize,
        mmax: usize,
        nlat: usize,
        nlon: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "CFL violation at radial step {slice}: courant number {courant:.4} > 1 (min velocity {v_min:.3} km/s)"
    )]
    Stability {
        slice: usize,
        v_min: f64,
        courant: f64,
    },

    #[error("forward tape does not match the current parameters")]
    StaleTape,

    #[error("every (batch, channel) pair is masked; loss is undefined")]
    EmptyLoss,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("dataset split failed: {0}")]
    Split(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
