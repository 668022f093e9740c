use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u32, offset: u64 },

    #[error("unknown dtype code {code} at byte {offset}")]
    UnknownDtype { code: u32, offset: u64 },

    #[error("truncated file: needed {needed} bytes at byte {offset}, {available} available")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("trailing data: {extra} unexpected bytes after byte {offset}")]
    TrailingData { offset: u64, extra: u64 },

    #[error("non-finite value {value} at byte {offset}")]
    NonFinite { offset: u64, value: f32 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("weights sum to zero")]
    ZeroWeights,

    #[error("k = {k} exceeds the number of points n = {n}")]
    TooManyClusters { k: usize, n: usize },

    #[error("no quantized tokens to measure")]
    NothingQuantized,

    #[error("page residency violated: {needed} table bytes exceed a {row_bytes}-byte row")]
    PageResidency { needed: usize, row_bytes: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
