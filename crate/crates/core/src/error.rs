use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad IDX magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is outside 0..{num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("corruption fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),

    #[error("label corruption needs at least 2 classes, dataset has {0}")]
    TooFewClasses(usize),

    #[error("corruption can only be applied to a training split")]
    NotTrainSplit,

    #[error("corruption spec is inconsistent: {0}")]
    InvalidCorruptionSpec(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("class pair must differ, got i = j = {0}")]
    SameClass(usize),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("no sample with a different label exists for query id {0}")]
    NoDifferentLabel(u64),

    #[error("sample id {0} not found")]
    UnknownSample(u64),

    #[error("no margin available for sample id {0}")]
    MissingMargin(u64),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("output directory {dir} belongs to a different manifest ({found}, expected {expected})")]
    ManifestMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("{0} already holds margin results; pass --resume to continue it")]
    ResumeRequired(PathBuf),

    #[error("run interrupted after {0} committed jobs")]
    Interrupted(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
