use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or sequence does not have the shape the operation requires.
    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),

    /// A scenario descriptor is out of its valid domain.
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// A system or model configuration is out of its valid domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Underlying file IO failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 8], got: [u8; 8] },

    /// A file uses a format version this build cannot read.
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    /// A file field holds a code with no defined meaning.
    #[error("invalid field encoding: {0}")]
    InvalidEncoding(String),

    /// Noise cannot be scaled against an all-zero signal.
    #[error("zero signal: {0}")]
    ZeroSignal(&'static str),

    /// A noise parameter is out of its valid domain.
    #[error("invalid noise params: {0}")]
    InvalidParams(String),

    /// Clean and corrupted inputs are identical, so the noise ratio is undefined.
    #[error("zero noise power between clean and corrupted inputs")]
    ZeroNoise,

    /// Noise calibration did not reach the target within its iteration budget.
    #[error("calibration diverged: {0}")]
    CalibrationDiverged(String),

    /// A prediction was requested from an empty history.
    #[error("empty history")]
    EmptyHistory,

    /// A target with zero energy makes the normalized error undefined.
    #[error("zero-energy target")]
    ZeroTarget,

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// The noise variance for spectral efficiency must be positive.
    #[error("invalid noise variance {0}")]
    InvalidNoiseVar(f64),

    /// Two entries in a ranking table share the same model name.
    #[error("duplicate model name {0:?}")]
    DuplicateModel(String),

    /// A ranking or aggregation was requested over an empty set.
    #[error("empty subset: {0}")]
    EmptySubset(&'static str),

    /// Efficiency scores are undefined when every cost is zero.
    #[error("all costs are zero")]
    AllZeroCosts,

    /// An autocorrelation series is too short for the requested lag.
    #[error("series of length {len} too short for lag {lag}")]
    SeriesTooShort { len: usize, lag: usize },

    /// A required input artifact is absent.
    #[error("missing data: {0}")]
    MissingData(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
