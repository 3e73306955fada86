use thiserror::Error;

use foam_autodiff::AutodiffError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("world generation: {0}")]
    World(String),

    #[error("environment `{env}`: no node pair within {min}..={max} nodes after {attempts} attempts")]
    RouteSampling {
        env: String,
        min: usize,
        max: usize,
        attempts: usize,
    },

    #[error("node {node} does not exist in environment `{env}`")]
    UnknownNode { env: String, node: usize },

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("nodes {a} and {b} are disconnected in environment `{env}`")]
    Disconnected { env: String, a: usize, b: usize },

    #[error("invalid route: {0}")]
    InvalidRoute(String),

    #[error("cannot parse instruction: {0}")]
    Parse(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("{what}: non-finite loss at {context}")]
    NonFiniteLoss { what: &'static str, context: String },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("batch mismatch: {0}")]
    BatchMismatch(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Broad category used by the command line to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFiniteLoss { .. } | Error::Divergence(_) => ErrorKind::Numerical,
            Error::Autodiff(AutodiffError::NonFinite { .. })
            | Error::Autodiff(AutodiffError::NonFiniteGradient { .. }) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
