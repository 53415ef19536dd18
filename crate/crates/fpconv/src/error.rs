use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i64, num_classes: usize },
    #[error("non-finite gradient in {context}")]
    NonFiniteGradient { context: String },
    #[error("projection weights already normalized ({tag})")]
    AlreadyNormalized { tag: &'static str },
    #[error("projection weights are not normalized")]
    UnnormalizedWeights,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("requested {requested} samples from a cloud of {available} points")]
    TooManySamples { requested: usize, available: usize },
    #[error("requested {requested} neighbors from {available} source points")]
    TooFewSources { requested: usize, available: usize },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    DivergedLoss { epoch: usize, step: usize, loss: f64 },
    #[error("bad checkpoint {path}: {message}")]
    BadCheckpoint { path: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
