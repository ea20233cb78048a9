use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("unsupported bit depth {0} (only 8-bit samples are supported)")]
    UnsupportedBitDepth(u32),

    #[error("image is not RGB: {0}")]
    NotRgb(String),

    #[error("region out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pmf support mismatch: {0}")]
    SupportMismatch(String),

    #[error("alphabet of {0} symbols does not fit the frequency precision")]
    AlphabetTooLarge(usize),

    #[error("range decoder ran out of input")]
    SourceExhausted,

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("bad container magic")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("weights fingerprint mismatch (container {container}, loaded {loaded})")]
    FingerprintMismatch { container: String, loaded: String },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite loss at step {step}: main={main}, bias={bias}")]
    NonFiniteLoss { step: u64, main: f64, bias: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
