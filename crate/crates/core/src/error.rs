use std::path::PathBuf;

use crate::embedding::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("{0} requires L2-normalized input")]
    NotNormalized(&'static str),

    #[error("label {label} out of range for {k} entries")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("positive set is empty")]
    EmptyPositiveSet,

    #[error(
        "transport kernel underflowed on an entire {axis} {index}; use a smaller lambda_ot \
         or enable the log-domain fallback"
    )]
    KernelUnderflow { axis: &'static str, index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("query identities absent from gallery: {0:?}")]
    MissingGalleryIdentity(Vec<i64>),

    #[error("every instance is an outlier")]
    AllOutliers,

    #[error("clustering produced no clusters for the {0} modality")]
    NoClusters(Modality),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
