use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid process spec: {0}")]
    InvalidSpec(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("joint distribution would hold {count} trajectories, above the cap of {cap}")]
    CapExceeded { count: u128, cap: u64 },
    #[error("not a valid causal conditional table: {0}")]
    Unnormalized(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate feature id `{0}`")]
    DuplicateId(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
