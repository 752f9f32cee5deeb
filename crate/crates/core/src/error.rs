use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} (layer {layer})")]
    NonFinite { what: &'static str, layer: usize },

    #[error("non-finite loss in stage {stage} at step {step}")]
    NumericAbort { stage: String, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated file: {missing} bytes missing")]
    Truncated { missing: u64 },

    #[error("dimension error in row {row}: header declares {expected_state}/{expected_action}, row has {state}/{action}")]
    RowDimension {
        row: usize,
        expected_state: usize,
        expected_action: usize,
        state: usize,
        action: usize,
    },

    #[error("provenance mismatch: policy fitted on `{policy}`, gmm fitted on `{gmm}`")]
    Provenance { policy: String, gmm: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("output directory {0} already holds a run with a different config hash")]
    HashCollision(PathBuf),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("no sign change on (0,1) for the stationarity condition")]
    NoBracket,

    #[error("stage `{stage}` cannot start: {missing} not available")]
    StageOrder { stage: &'static str, missing: &'static str },

    #[error("malformed log record: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(what, expected, got))
    }
}
