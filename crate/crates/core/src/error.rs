use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("layer {layer} out of range 1..={max}")]
    Layer { layer: usize, max: usize },

    #[error("invalid layer order: from {from} > to {to}")]
    LayerOrder { from: usize, to: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("power-law fit rejected: {0}")]
    Fit(String),

    #[error("learning-rate solve failed: {0}")]
    Solve(String),

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("thread pool: {0}")]
    Pool(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
