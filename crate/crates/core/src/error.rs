use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("unknown anchor id {0}")]
    UnknownAnchor(u32),

    #[error("unknown band index {0}")]
    UnknownBand(usize),

    #[error("recording is empty")]
    EmptyRecording,

    #[error("requested {requested} s of integration but only {available} s recorded")]
    ExceedsRecording { requested: f64, available: f64 },

    #[error("calibration has zero magnitude at band {band}, bin {bin}")]
    ZeroCalibration { band: usize, bin: usize },

    #[error("missing band {0}")]
    MissingBand(usize),

    #[error("no threshold crossing on the leading edge")]
    NoCrossing,

    #[error("need at least {needed} measurements, got {got}")]
    Underdetermined { needed: usize, got: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
