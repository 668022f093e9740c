use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest usable `k`: index `0xFFFF` is reserved as the full-precision marker.
pub const MAX_CENTROIDS: usize = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqConfig {
    /// Subvectors per token.
    pub m: usize,
    /// Centroids per subvector per window.
    pub k: usize,
    pub iters: usize,
    /// Tokens per clustering window; 0 clusters the whole sequence at once.
    pub window_len: usize,
    pub sink_tokens: usize,
    pub recent_tokens: usize,
    /// Trailing score rows summed into the importance weights.
    pub t: usize,
    pub rng_seed: u64,
    /// Row buffer that one window's 16-bit lookup table must fit in.
    pub row_buffer_bytes: usize,
}

impl Default for PqConfig {
    fn default() -> Self {
        Self {
            m: 32,
            k: 512,
            iters: 4,
            window_len: 0,
            sink_tokens: 8,
            recent_tokens: 32,
            t: 32,
            rng_seed: 0,
            row_buffer_bytes: 1024,
        }
    }
}

/// Byte accounting behind [`PqConfig::compression`], keys and values together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionAccounting {
    pub raw_bytes: u64,
    pub index_bytes: u64,
    pub codebook_bytes: u64,
    pub full_precision_bytes: u64,
    pub index_bits: u32,
    pub factor: f64,
}

impl PqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("m must be positive".into()));
        }
        if self.k == 0 || self.k > MAX_CENTROIDS {
            return Err(Error::Invalid(format!(
                "k = {} outside 1..={MAX_CENTROIDS}",
                self.k
            )));
        }
        self.check_page_residency(self.row_buffer_bytes)
    }

    pub fn check_head_dim(&self, head_dim: usize) -> Result<()> {
        if !head_dim.is_multiple_of(self.m) {
            return Err(Error::Invalid(format!(
                "head_dim {head_dim} is not divisible by m = {}",
                self.m
            )));
        }
        Ok(())
    }

    /// One window's per-subvector table, `k` 16-bit entries, must fit one row.
    pub fn check_page_residency(&self, row_bytes: usize) -> Result<()> {
        let needed = self.k * 2;
        if needed > row_bytes {
            return Err(Error::PageResidency { needed, row_bytes });
        }
        Ok(())
    }

    /// Bits per packed centroid index.
    pub fn index_bits(&self) -> u32 {
        (usize::BITS - (self.k.max(2) - 1).leading_zeros()).max(1)
    }

    pub fn n_windows(&self, n_quantized: usize) -> usize {
        match (n_quantized, self.window_len) {
            (0, _) => 0,
            (_, 0) => 1,
            (q, w) => q.div_ceil(w),
        }
    }

    /// Tokens that are clustered (outside the sink and recent ranges).
    pub fn n_quantized(&self, n_tokens: usize) -> usize {
        n_tokens.saturating_sub(self.sink_tokens + self.recent_tokens)
    }

    /// KV capacity reduction for one head of `n_tokens` tokens against a 16-bit
    /// raw cache. Indices are counted bit-packed at [`Self::index_bits`]; codebooks
    /// as 16-bit centroids; sink and recent tokens at full 16-bit width.
    pub fn compression(&self, n_tokens: usize, head_dim: usize) -> CompressionAccounting {
        let n = n_tokens as u64;
        let d = head_dim as u64;
        let q = self.n_quantized(n_tokens) as u64;
        let bits = self.index_bits();
        let k_eff = (self.k as u64).min(q);
        let raw_bytes = 2 * n * d * 2;
        let index_bytes = 2 * (q * self.m as u64 * bits as u64).div_ceil(8);
        let codebook_bytes = 2 * self.n_windows(q as usize) as u64 * k_eff * d * 2;
        let full_precision_bytes = 2 * (n - q) * d * 2;
        let stored = index_bytes + codebook_bytes + full_precision_bytes;
        CompressionAccounting {
            raw_bytes,
            index_bytes,
            codebook_bytes,
            full_precision_bytes,
            index_bits: bits,
            factor: if stored == 0 { 1.0 } else { raw_bytes as f64 / stored as f64 },
        }
    }
}
