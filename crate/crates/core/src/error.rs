use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("invalid Markov spec: {0}")]
    Spec(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training { epoch: usize, batch: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
