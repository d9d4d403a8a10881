use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty attention context (query row {row})")]
    EmptyAttentionContext { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty component")]
    EmptyComponent,

    #[error("component count {n} exceeds ID codebook of size {codebook}")]
    CodebookExceeded { n: usize, codebook: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("duplicate component {0} in attention context")]
    DuplicateComponent(usize),

    #[error("attention gain must be positive, got {0}")]
    NonPositiveGain(f64),

    #[error("scene too crowded: could not place component {component} after {attempts} attempts")]
    SceneTooCrowded { component: usize, attempts: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler produced non-finite state at step {step}")]
    SamplerDiverged { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
