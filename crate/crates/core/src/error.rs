use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate vector (norm {norm:e}); the encoder has collapsed")]
    DegenerateVector { norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lexicon capacity exceeded: {0}")]
    Capacity(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid style split: {0}")]
    StyleSplit(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("int32 accumulator overflow in layer {layer}")]
    Overflow { layer: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
