use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum DivaError {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },
    #[error("invalid shape {0:?}: {1}")]
    InvalidShape(Vec<usize>, String),
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from the tape (no path to a grad-enabled leaf)")]
    DetachedLoss,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid recap strategy: {0}")]
    Strategy(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("ppm error: {0}")]
    Ppm(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training error: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DivaError>;
