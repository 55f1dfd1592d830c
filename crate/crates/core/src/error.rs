use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::SpreadKind;

pub type Result<T> = std::result::Result<T, PfpError>;

#[derive(Debug, Error)]
pub enum PfpError {
    #[error("expected {expected:?} spread, got {found:?}")]
    WrongSpreadKind { expected: SpreadKind, found: SpreadKind },

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("corrupt moments at element {index}: variance {value} is below -{slack}", slack = crate::tensor::EPS_REP)]
    CorruptMoments { index: usize, value: f64 },

    #[error("convention mismatch: {0}")]
    ConventionMismatch(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("manifest error: {0}")]
    ManifestError(String),

    #[error("negative variance {value} in `{tensor}` at element {index}")]
    NegativeVariance { tensor: String, index: usize, value: f64 },

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(crate::tensor::Violation),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PfpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PfpError::Io { path: path.into(), source }
    }

    /// Stable short name of the error class, used in CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            PfpError::WrongSpreadKind { .. } => "WrongSpreadKind",
            PfpError::ShapeError(_) => "ShapeError",
            PfpError::CorruptMoments { .. } => "CorruptMoments",
            PfpError::ConventionMismatch(_) => "ConventionMismatch",
            PfpError::InsufficientSamples { .. } => "InsufficientSamples",
            PfpError::UnknownTransform(_) => "UnknownTransform",
            PfpError::BadMagic { .. } => "BadMagic",
            PfpError::UnsupportedVersion(_) => "UnsupportedVersion",
            PfpError::UnsupportedDtype(_) => "UnsupportedDtype",
            PfpError::ManifestError(_) => "ManifestError",
            PfpError::NegativeVariance { .. } => "NegativeVariance",
            PfpError::LengthMismatch { .. } => "LengthMismatch",
            PfpError::LabelOutOfRange { .. } => "LabelOutOfRange",
            PfpError::InvariantViolation(_) => "InvariantViolation",
            PfpError::InvalidArgument(_) => "InvalidArgument",
            PfpError::Io { .. } => "Io",
        }
    }
}
