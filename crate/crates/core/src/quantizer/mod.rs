//! Importance-weighted product quantization of one head's KV cache.

mod build;
mod codebook;
mod config;
mod importance;
mod kmeans;
mod sidecar;

pub use build::{
    append_decode_token, build_compressed_kv, compress_head, quantization_error, token_errors,
    QuantizationError,
};
pub use codebook::{
    Codebook, CompressedKv, HeadSlice, PqIndices, WindowCodebook, FP_SENTINEL, NO_WINDOW,
};
pub use config::{CompressionAccounting, PqConfig, MAX_CENTROIDS};
pub use importance::{aggregate_gqa, causal_scores, compute_importance_weights};
pub use kmeans::{kmeans_pp_init, nearest, weighted_kmeans, weighted_lloyd, KMeansResult};
pub use sidecar::{decode_sidecar, encode_sidecar, read_sidecar, write_sidecar, PQ_MAGIC, PQ_VERSION};
