//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid axis: {0}")]
    InvalidAxis(String),

    #[error("rank out of range: {0}")]
    RankOutOfRange(String),

    #[error("svd did not converge: {0}")]
    SvdConvergence(String),

    #[error("dimension factorization mismatch: {0}")]
    DimFactorization(String),

    #[error("compression rate out of range: {0}")]
    InvalidRate(String),

    #[error("infeasible compression target: {0}")]
    Infeasible(String),

    #[error("plan does not match layer: {0}")]
    PlanMismatch(String),

    #[error("feature cache checksum mismatch: {0}")]
    ChecksumMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("job {0} failed; remaining jobs cancelled")]
    Cancelled(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("document parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("document encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
