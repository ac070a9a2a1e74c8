use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed corpus: {0}")]
    MalformedCorpus(String),

    #[error("unknown emotion: {0:?}")]
    UnknownEmotion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate feature vector (norm {norm:e} <= {eps:e})")]
    DegenerateFeature { norm: f64, eps: f64 },

    #[error("non-finite loss at step {step}: lm={l_lm} sent={l_sent} sim={l_sim}")]
    NonFiniteLoss {
        step: usize,
        l_lm: f64,
        l_sent: f64,
        l_sim: f64,
    },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
