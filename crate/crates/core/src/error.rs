use std::fmt;
use std::path::PathBuf;

/// Pipeline stage labels attached to errors raised inside [`crate::update::update_pipeline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Register,
    Transform,
    Detect,
    Remove,
    AssignFeatures,
    Merge,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Register => "register",
            Stage::Transform => "transform",
            Stage::Detect => "detect",
            Stage::Remove => "remove",
            Stage::AssignFeatures => "assign-features",
            Stage::Merge => "merge",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("map contains no gaussians")]
    EmptyMap,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("scan list is empty")]
    EmptyScanList,
    #[error("no pose record for scan {0}")]
    MissingPose(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no correspondences within the gate at iteration {iteration}")]
    NoOverlap { iteration: usize },
    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("rotation is not proper (det {0})")]
    ImproperRotation(f64),
    #[error("unsupported SH degree {0}")]
    UnsupportedDegree(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("SH degree mismatch: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("no donor gaussians and no fallback features")]
    NoDonors,
    #[error("depth map dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("need at least 2 valid pixels, got {0}")]
    TooFewPixels(usize),
    #[error("scene spec error: {0}")]
    Spec(String),
    #[error("label/report mismatch: {0}")]
    LabelMismatch(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
