use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("system size must be at least 1")]
    EmptySystem,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("spin configuration entry {index} is {value}, expected +1 or -1")]
    MalformedSpin { index: usize, value: i32 },

    #[error("n = {n} exceeds the enumeration cap of {cap}")]
    AboveCap { n: usize, cap: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("four-point tensor required but not computed")]
    MissingFourPoint,

    #[error("matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },

    #[error("Jacobi iteration hit the sweep cap; off-diagonal mass {off_diagonal:e}")]
    NoConvergence { off_diagonal: f64 },

    #[error("index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("inverse temperature {0} is outside the high-temperature range beta < 1")]
    NotHighTemperature(f64),

    #[error("invalid chain configuration: {0}")]
    InvalidChain(String),

    #[error("series of length {len} too short for {batches} batches")]
    SeriesTooShort { len: usize, batches: usize },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),

    #[error("instance {instance} (seed {seed:#018x}) failed: {source}")]
    Instance {
        instance: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed couplings dump: {0}")]
    BadDump(String),
}
