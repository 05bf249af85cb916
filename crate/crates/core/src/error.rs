use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFiniteOp { op: &'static str },

    #[error("non-finite value at rollout step {step}")]
    NonFiniteStep { step: usize },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no trajectory with at least {needed} states (longest has {longest})")]
    DatasetTooShort { needed: usize, longest: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// True for the numeric-failure family (NaN/Inf during a forward or backward pass,
    /// or a diverging training loss).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteOp { .. } | Error::NonFiniteStep { .. } | Error::Diverged { .. }
        )
    }
}
