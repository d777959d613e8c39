use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // volume files
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic bytes in {what}: expected {expected:?}")]
    BadMagic { what: String, expected: &'static str },
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u16 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("element type {found} where {expected} was expected")]
    UnexpectedDtype { expected: &'static str, found: u8 },
    #[error("invalid dimensions {0:?}: each must be positive and the voxel count at most 2^31")]
    DimensionOverflow([u64; 3]),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingData(usize),
    #[error("invalid voxel size {0:?}: must be finite and positive")]
    InvalidVoxelSize([f32; 3]),
    #[error("mask value {value} at index {index} is not 0 or 1")]
    InvalidMaskValue { index: usize, value: u8 },
    #[error("volume has zero variance and cannot be normalized")]
    DegenerateVolume,

    // patches
    #[error("coordinate {coord:?} lies outside volume of dims {dims:?}")]
    CoordOutOfVolume { coord: [usize; 3], dims: [usize; 3] },
    #[error("patch size {0} is not odd")]
    EvenPatchSize(usize),

    // engine
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm in train mode needs at least two samples")]
    SingleSampleTrainBatch,
    #[error("non-finite input to softmax")]
    NonFiniteInput,
    #[error("backward called without a recorded train-mode forward pass")]
    NoForwardState,
    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    // training
    #[error("case {0} has no FLAIR channel")]
    MissingFlairChannel(String),
    #[error("case {0} has no lesion mask")]
    MissingMask(String),
    #[error("no positive (lesion) voxels to sample")]
    NoPositives,
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("network is not trained")]
    UntrainedNetwork,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    // inference / metrics
    #[error("channel mismatch: expected {expected:?}, found {found:?}")]
    ChannelMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("ground truth mask is empty")]
    EmptyGroundTruth,
    #[error("undefined ratio: {0}")]
    UndefinedRatio(&'static str),
    #[error("correlation needs at least 3 paired values with nonzero variance")]
    DegenerateVariance,

    // phantom
    #[error("could not place lesion {lesion} of case {case} after {attempts} attempts")]
    PlacementFailure { case: usize, lesion: usize, attempts: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
