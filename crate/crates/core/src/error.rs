use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("unsupported format version {0}")]
    FormatVersion(u32),

    #[error("row-count mismatch in layer `{layer}`: expected {expected} rows, found {found}")]
    RowCountMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in layer `{layer}` at row {row}, column {col}")]
    NonFinite { layer: String, row: usize, col: usize },

    #[error("class id {id} out of range for {n_classes} classes ({what})")]
    ClassOutOfRange {
        what: &'static str,
        id: u32,
        n_classes: usize,
    },

    #[error("checksum mismatch for {file}")]
    Checksum { file: String },

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch in layer {layer}: expected {expected}, found {found}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("layer names differ: {0}")]
    LayerMismatch(String),

    #[error("class {0} has no training instances")]
    EmptyClass(u32),

    #[error("empty layer set")]
    EmptyLayerSet,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("spearman correlation undefined: constant input")]
    ConstantInput,

    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
