use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `axis` names the offending dimension.
    #[error("shape mismatch in {op} on axis {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("degenerate variance in batchnorm: channel has {count} element(s) per batch, need at least 2")]
    DegenerateVariance { count: usize },

    #[error("unsupported geometry: {0}")]
    Geometry(String),

    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("failed to load {path}: {detail}")]
    Load { path: PathBuf, detail: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("episode {episode} (seed {seed}) failed: {source}")]
    Episode {
        episode: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Strip episode wrappers to reach the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Episode { source, .. } => source.root(),
            other => other,
        }
    }
}
