//! KV-cache containers, the binary dump format and synthetic generators.

mod format;
mod synthetic;

pub use format::{load_kv_dump, read_kv_dump, write_kv_dump, write_kv_dump_to, KV_MAGIC, KV_VERSION};
pub use synthetic::{
    generate_block_channels, generate_synthetic_kv, heavy_token_weights, BlockChannelSpec,
    SyntheticSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Payload encoding of key/value scalars in a dump file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F16,
    Bf16,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Bf16 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::Bf16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::Bf16 => 2,
        }
    }
}

/// Keys, values and optional importance weights for every (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct KvDump<T> {
    n_layers: usize,
    n_kv_heads: usize,
    n_tokens: usize,
    head_dim: usize,
    dtype: DType,
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    weights: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> KvDump<T> {
    /// `keys`/`values` are indexed `layer * n_kv_heads + head`.
    pub fn new(
        n_layers: usize,
        n_kv_heads: usize,
        keys: Vec<Matrix<T>>,
        values: Vec<Matrix<T>>,
        weights: Option<Vec<Vec<T>>>,
    ) -> Result<Self> {
        let heads = n_layers * n_kv_heads;
        if keys.len() != heads || values.len() != heads {
            return Err(Error::Dimension(format!(
                "expected {heads} key and value matrices, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        let (n_tokens, head_dim) = keys.first().map_or((0, 0), Matrix::shape);
        for (i, (k, v)) in keys.iter().zip(&values).enumerate() {
            if k.shape() != (n_tokens, head_dim) || v.shape() != (n_tokens, head_dim) {
                return Err(Error::Dimension(format!(
                    "head {i}: keys {:?} / values {:?}, expected ({n_tokens}, {head_dim})",
                    k.shape(),
                    v.shape()
                )));
            }
            if !k.is_finite() || !v.is_finite() {
                return Err(Error::Invalid(format!("head {i}: non-finite entry")));
            }
        }
        if let Some(w) = &weights {
            if w.len() != heads {
                return Err(Error::Dimension(format!(
                    "expected {heads} weight vectors, got {}",
                    w.len()
                )));
            }
            for (i, wv) in w.iter().enumerate() {
                validate_weights(wv).map_err(|e| Error::Invalid(format!("head {i}: {e}")))?;
                if wv.len() != n_tokens {
                    return Err(Error::Dimension(format!(
                        "head {i}: {} weights for {n_tokens} tokens",
                        wv.len()
                    )));
                }
            }
        }
        Ok(Self {
            n_layers,
            n_kv_heads,
            n_tokens,
            head_dim,
            dtype: DType::F32,
            keys,
            values,
            weights,
        })
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_weights(mut self, weights: Option<Vec<Vec<T>>>) -> Result<Self> {
        let keys = std::mem::take(&mut self.keys);
        let values = std::mem::take(&mut self.values);
        let dtype = self.dtype;
        Ok(Self::new(self.n_layers, self.n_kv_heads, keys, values, weights)?.with_dtype(dtype))
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn slot(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.n_layers || head >= self.n_kv_heads {
            return Err(Error::Invalid(format!(
                "(layer {layer}, head {head}) outside {}x{}",
                self.n_layers, self.n_kv_heads
            )));
        }
        Ok(layer * self.n_kv_heads + head)
    }

    pub fn keys(&self, layer: usize, head: usize) -> Result<&Matrix<T>> {
        Ok(&self.keys[self.slot(layer, head)?])
    }

    pub fn values(&self, layer: usize, head: usize) -> Result<&Matrix<T>> {
        Ok(&self.values[self.slot(layer, head)?])
    }

    pub fn weights(&self, layer: usize, head: usize) -> Result<Option<&[T]>> {
        let s = self.slot(layer, head)?;
        Ok(self.weights.as_ref().map(|w| w[s].as_slice()))
    }

    pub fn has_weights(&self) -> bool {
        self.weights.is_some()
    }

    pub(crate) fn all_keys(&self) -> &[Matrix<T>] {
        &self.keys
    }
    pub(crate) fn all_values(&self) -> &[Matrix<T>] {
        &self.values
    }
    pub(crate) fn all_weights(&self) -> Option<&[Vec<T>]> {
        self.weights.as_deref()
    }
}

/// Nonnegative, finite, and not all zero.
pub fn validate_weights<T: Scalar>(w: &[T]) -> Result<()> {
    for (i, v) in w.iter().enumerate() {
        if !v.is_finite() || *v < T::zero() {
            return Err(Error::NegativeWeight {
                index: i,
                value: v.to_f64_lossy(),
            });
        }
    }
    if !w.is_empty() && w.iter().all(|v| *v == T::zero()) {
        return Err(Error::ZeroWeights);
    }
    Ok(())
}
