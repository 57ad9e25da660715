use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("signal too short: {samples} samples, need at least {needed}")]
    EmptyOutput { samples: usize, needed: usize },
    #[error("utterance {id} has no frames left")]
    EmptyUtterance { id: String },
    #[error("utterance {id} too short: {frames} frames, need at least {needed}")]
    TooShort {
        id: String,
        frames: usize,
        needed: usize,
    },
    #[error("degenerate autocorrelation at frame {index}")]
    DegenerateFrame { index: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),
    #[error("EM failed to converge: {0}")]
    Convergence(String),
    #[error("normalization state error: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True when the error stems from bad user input rather than a failure
    /// inside the pipeline. The CLI maps this to exit code 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Convergence(_)
            | Error::Calibration(_)
            | Error::DegenerateFrame { .. } => false,
            Error::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        })
    }
}
