use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("length error: {0}")]
    Length(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("infeasible budget: {0}")]
    Budget(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
