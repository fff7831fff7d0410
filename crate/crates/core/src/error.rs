use thiserror::Error;

/// Errors produced anywhere in the pretraining and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate scan_id `{0}`")]
    DuplicateScanId(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),

    #[error("unknown scan_id `{0}`")]
    UnknownScan(String),

    #[error("cannot relate scan `{0}` to itself")]
    SelfPair(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch size {0} must be a positive even number")]
    OddBatchSize(usize),

    #[error("batch needs {needed} disjoint positive pairs but only {found} are available")]
    InsufficientPairs { needed: usize, found: usize },

    #[error("image is {height}x{width}, smaller than the required {min_height}x{min_width}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("anchor row {0} has no positive entry")]
    NoPositive(usize),

    #[error("embedding row {0} has zero norm")]
    ZeroNorm(usize),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("labels contain a single class; both classes are required")]
    SingleClass,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image `{path}`: {message}")]
    Image { path: String, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
