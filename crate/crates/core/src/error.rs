use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing asset: {0}")]
    MissingAsset(PathBuf),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("time {t} outside [{first}, {last}]")]
    OutOfRange { t: f64, first: f64, last: f64 },
    #[error("unknown object id `{0}`")]
    UnknownObject(String),
    #[error("invalid target geometry: {0}")]
    InvalidTarget(String),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input too small: {0}")]
    TooSmall(String),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("generator failure: {0}")]
    GeneratorFailure(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("noise scale {0} outside [0, 1]")]
    InvalidScale(f64),
    #[error("invalid chunking: {0}")]
    InvalidChunking(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    /// Stable variant name for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingAsset(_) => "MissingAsset",
            Error::Schema(_) => "Schema",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::Io { .. } => "Io",
            Error::Image { .. } => "Image",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::UnknownObject(_) => "UnknownObject",
            Error::InvalidTarget(_) => "InvalidTarget",
            Error::BehindCamera(_) => "BehindCamera",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::TooSmall(_) => "TooSmall",
            Error::NoValidPixels => "NoValidPixels",
            Error::DegenerateTrajectory(_) => "DegenerateTrajectory",
            Error::GeneratorFailure(_) => "GeneratorFailure",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidScale(_) => "InvalidScale",
            Error::InvalidChunking(_) => "InvalidChunking",
            Error::Config(_) => "Config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
