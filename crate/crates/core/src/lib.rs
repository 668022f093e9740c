//! Importance-weighted product quantization of transformer KV caches.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*32`/`*64`
//! aliases below pin the common instantiations.

pub mod attention;
pub mod channel_sort;
pub mod error;
pub mod io_util;
pub mod kv;
pub mod matrix;
pub mod quantizer;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type KvDump32 = kv::KvDump<f32>;
pub type KvDump64 = kv::KvDump<f64>;
pub type Codebook32 = quantizer::Codebook<f32>;
pub type Codebook64 = quantizer::Codebook<f64>;
pub type CompressedKv32 = quantizer::CompressedKv<f32>;
pub type CompressedKv64 = quantizer::CompressedKv<f64>;
pub type AttentionOutput32 = attention::AttentionOutput<f32>;
pub type AttentionOutput64 = attention::AttentionOutput<f64>;
