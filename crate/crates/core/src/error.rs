use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two evaluations differ ({0} vs {1})")]
    Nondeterministic(f64, f64),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{rows} targets exceed {cols} predictions")]
    TooManyTargets { rows: usize, cols: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
