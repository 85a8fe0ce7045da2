use std::path::PathBuf;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("time {t} lies outside the record interval [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("step too large: dt * rate = {stiffness:.3} exceeds {limit}")]
    StepTooLarge { stiffness: f64, limit: f64 },

    #[error("{module}: non-finite value at sample {sample}")]
    NonFinite { module: &'static str, sample: usize },

    #[error("{module}: singular combination at sample {sample}: {detail}")]
    Singular {
        module: &'static str,
        sample: usize,
        detail: String,
    },

    #[error("{module}: {detail}")]
    Numerical { module: &'static str, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that come from the numerics rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Singular { .. }
                | Error::Numerical { .. }
                | Error::StepTooLarge { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
