use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operand dimension disagrees with what the operation requires.
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// The operation exists but not for this configuration.
    #[error("{op}: unsupported configuration: {detail}")]
    Unsupported { op: &'static str, detail: String },

    /// Batch statistics over a single sample have zero variance by
    /// construction; normalizing would divide noise by noise.
    #[error("batch norm: per-channel sample count is 1 (batch and both spatial extents are 1); cannot normalize")]
    DegenerateStatistics,

    #[error("{op}: extent {extent} is not divisible by {factor}; crop the input to a multiple of {factor} first")]
    NotDivisible {
        op: &'static str,
        extent: usize,
        factor: usize,
    },

    #[error("non-finite gradient in `{name}` at iteration {iteration}")]
    NonFiniteGradient { name: String, iteration: u64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
