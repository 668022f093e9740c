//! Compressed-KV containers: per-window codebooks, 16-bit indices, full-precision rows.

use serde::Serialize;

use super::config::PqConfig;
use crate::channel_sort::ChannelPermutation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Index value marking a token stored at full precision.
pub const FP_SENTINEL: u16 = 0xFFFF;
/// Window id of a full-precision token.
pub const NO_WINDOW: u32 = u32::MAX;

/// Centroid tables of one clustering window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCodebook<T> {
    /// Prefill token range `[start, end)` clustered into this window.
    pub start: usize,
    pub end: usize,
    /// One `k × (head_dim / m)` table per subvector.
    pub tables: Vec<Matrix<T>>,
    /// Objective after each refinement round, summed over subvectors.
    pub objective_per_iter: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    m: usize,
    k: usize,
    sub_dim: usize,
    windows: Vec<WindowCodebook<T>>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(m: usize, k: usize, sub_dim: usize, windows: Vec<WindowCodebook<T>>) -> Self {
        debug_assert!(windows
            .iter()
            .all(|w| w.tables.len() == m && w.tables.iter().all(|t| t.shape() == (k, sub_dim))));
        Self {
            m,
            k,
            sub_dim,
            windows,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }
    pub fn windows(&self) -> &[WindowCodebook<T>] {
        &self.windows
    }
    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn table(&self, window: usize, sub: usize) -> &Matrix<T> {
        &self.windows[window].tables[sub]
    }

    pub fn centroid(&self, window: usize, sub: usize, idx: u16) -> &[T] {
        self.windows[window].tables[sub].row(idx as usize)
    }

    /// Concatenates the selected centroid of every subvector.
    pub fn decode(&self, window: usize, codes: &[u16]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.m * self.sub_dim);
        for (s, &c) in codes.iter().enumerate() {
            out.extend_from_slice(self.centroid(window, s, c));
        }
        out
    }

    /// Nearest centroid per subvector in `window`'s tables.
    pub fn encode(&self, window: usize, x: &[T]) -> Vec<u16> {
        (0..self.m)
            .map(|s| {
                let sub = &x[s * self.sub_dim..(s + 1) * self.sub_dim];
                super::kmeans::nearest(sub, self.table(window, s)).0 as u16
            })
            .collect()
    }
}

/// Per-token, per-subvector centroid indices plus the token's window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PqIndices {
    m: usize,
    codes: Vec<u16>,
    windows: Vec<u32>,
}

impl PqIndices {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            codes: Vec::new(),
            windows: Vec::new(),
        }
    }

    pub(crate) fn from_parts(m: usize, codes: Vec<u16>, windows: Vec<u32>) -> Self {
        debug_assert_eq!(codes.len(), m * windows.len());
        Self { m, codes, windows }
    }

    /// Every token quantized; `codes` is token-major with `m` entries per token.
    pub fn from_codes(m: usize, codes: Vec<u16>, windows: Vec<u32>) -> Result<Self> {
        if m == 0 || codes.len() != m * windows.len() {
            return Err(Error::Dimension(format!(
                "{} codes for {} tokens of {m} subvectors",
                codes.len(),
                windows.len()
            )));
        }
        if codes.contains(&FP_SENTINEL) || windows.contains(&NO_WINDOW) {
            return Err(Error::Invalid("full-precision marker in quantized indices".into()));
        }
        Ok(Self { m, codes, windows })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_tokens(&self) -> usize {
        self.windows.len()
    }

    pub fn push_full_precision(&mut self) {
        self.codes.extend(std::iter::repeat_n(FP_SENTINEL, self.m));
        self.windows.push(NO_WINDOW);
    }

    pub fn set(&mut self, token: usize, window: usize, codes: &[u16]) {
        debug_assert_eq!(codes.len(), self.m);
        self.codes[token * self.m..(token + 1) * self.m].copy_from_slice(codes);
        self.windows[token] = window as u32;
    }

    pub fn is_full_precision(&self, token: usize) -> bool {
        self.windows[token] == NO_WINDOW
    }

    pub fn codes(&self, token: usize) -> &[u16] {
        &self.codes[token * self.m..(token + 1) * self.m]
    }

    /// `None` for full-precision tokens.
    pub fn window(&self, token: usize) -> Option<usize> {
        match self.windows[token] {
            NO_WINDOW => None,
            w => Some(w as usize),
        }
    }

    pub fn all_codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn all_windows(&self) -> &[u32] {
        &self.windows
    }
}

/// Borrowed view of one (layer, kv-head) of a dump.
#[derive(Debug, Clone, Copy)]
pub struct HeadSlice<'a, T> {
    pub keys: &'a Matrix<T>,
    pub values: &'a Matrix<T>,
    pub weights: Option<&'a [T]>,
}

/// One head's compressed KV cache. Codebooks, indices and full-precision rows all
/// live in the permuted channel order given by `perm_k` / `perm_v`.
///
/// Token order is `sink | middle | recent`. The middle range is quantized; it holds
/// full-precision spill rows only when the prefill left nothing to cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKv<T> {
    pub(crate) cfg: PqConfig,
    pub(crate) head_dim: usize,
    pub(crate) perm_k: ChannelPermutation,
    pub(crate) perm_v: ChannelPermutation,
    pub(crate) key_codebook: Codebook<T>,
    pub(crate) value_codebook: Codebook<T>,
    pub(crate) key_indices: PqIndices,
    pub(crate) value_indices: PqIndices,
    pub(crate) sink_keys: Matrix<T>,
    pub(crate) sink_values: Matrix<T>,
    pub(crate) spill_keys: Matrix<T>,
    pub(crate) spill_values: Matrix<T>,
    pub(crate) recent_keys: Matrix<T>,
    pub(crate) recent_values: Matrix<T>,
}

impl<T: Scalar> CompressedKv<T> {
    /// A cache in which every token is quantized, with identity channel order.
    /// Indices must reference existing windows and centroids.
    pub fn from_quantized(
        cfg: PqConfig,
        key_codebook: Codebook<T>,
        value_codebook: Codebook<T>,
        key_indices: PqIndices,
        value_indices: PqIndices,
    ) -> Result<Self> {
        let head_dim = key_codebook.m() * key_codebook.sub_dim();
        let n = key_indices.n_tokens();
        let consistent = value_codebook.m() * value_codebook.sub_dim() == head_dim
            && key_codebook.m() == cfg.m
            && value_codebook.m() == cfg.m
            && key_indices.m() == cfg.m
            && value_indices.m() == cfg.m
            && value_indices.n_tokens() == n;
        if !consistent {
            return Err(Error::Dimension("codebooks, indices and config disagree".into()));
        }
        for (cb, idx) in [(&key_codebook, &key_indices), (&value_codebook, &value_indices)] {
            for t in 0..n {
                let w = idx.window(t).unwrap_or(usize::MAX);
                if w >= cb.n_windows() || idx.codes(t).iter().any(|&c| c as usize >= cb.k()) {
                    return Err(Error::Invalid(format!("token {t} references a missing centroid")));
                }
            }
        }
        Ok(Self {
            perm_k: ChannelPermutation::identity(head_dim, cfg.m)?,
            perm_v: ChannelPermutation::identity(head_dim, cfg.m)?,
            cfg,
            head_dim,
            key_codebook,
            value_codebook,
            key_indices,
            value_indices,
            sink_keys: Matrix::zeros(0, head_dim),
            sink_values: Matrix::zeros(0, head_dim),
            spill_keys: Matrix::zeros(0, head_dim),
            spill_values: Matrix::zeros(0, head_dim),
            recent_keys: Matrix::zeros(0, head_dim),
            recent_values: Matrix::zeros(0, head_dim),
        })
    }

    pub fn config(&self) -> &PqConfig {
        &self.cfg
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn n_tokens(&self) -> usize {
        self.key_indices.n_tokens()
    }
    pub fn perm_k(&self) -> &ChannelPermutation {
        &self.perm_k
    }
    pub fn perm_v(&self) -> &ChannelPermutation {
        &self.perm_v
    }
    pub fn key_codebook(&self) -> &Codebook<T> {
        &self.key_codebook
    }
    pub fn value_codebook(&self) -> &Codebook<T> {
        &self.value_codebook
    }
    pub fn key_indices(&self) -> &PqIndices {
        &self.key_indices
    }
    pub fn value_indices(&self) -> &PqIndices {
        &self.value_indices
    }
    pub fn sink_len(&self) -> usize {
        self.sink_keys.rows()
    }
    pub fn recent_len(&self) -> usize {
        self.recent_keys.rows()
    }
    pub fn spill_len(&self) -> usize {
        self.spill_keys.rows()
    }
    pub fn fp_recent_keys(&self) -> &Matrix<T> {
        &self.recent_keys
    }
    pub fn fp_recent_values(&self) -> &Matrix<T> {
        &self.recent_values
    }
    pub fn fp_sink_keys(&self) -> &Matrix<T> {
        &self.sink_keys
    }
    pub fn fp_sink_values(&self) -> &Matrix<T> {
        &self.sink_values
    }

    pub fn n_quantized(&self) -> usize {
        (0..self.n_tokens())
            .filter(|&t| !self.key_indices.is_full_precision(t))
            .count()
    }

    /// Full-precision (key, value) rows of `token`, if it is stored that way.
    pub fn full_precision_row(&self, token: usize) -> Option<(&[T], &[T])> {
        let n = self.n_tokens();
        let sink = self.sink_len();
        let recent_start = n - self.recent_len();
        if token < sink {
            Some((self.sink_keys.row(token), self.sink_values.row(token)))
        } else if token >= recent_start {
            let r = token - recent_start;
            Some((self.recent_keys.row(r), self.recent_values.row(r)))
        } else if token - sink < self.spill_len() {
            let r = token - sink;
            Some((self.spill_keys.row(r), self.spill_values.row(r)))
        } else {
            None
        }
    }

    /// Key matrix in permuted channel order: centroids for quantized tokens,
    /// stored rows for the rest.
    pub fn reconstruct_keys(&self) -> Matrix<T> {
        self.reconstruct(true)
    }

    pub fn reconstruct_values(&self) -> Matrix<T> {
        self.reconstruct(false)
    }

    fn reconstruct(&self, keys: bool) -> Matrix<T> {
        let (cb, idx) = if keys {
            (&self.key_codebook, &self.key_indices)
        } else {
            (&self.value_codebook, &self.value_indices)
        };
        let mut data = Vec::with_capacity(self.n_tokens() * self.head_dim);
        for t in 0..self.n_tokens() {
            match idx.window(t) {
                Some(w) => data.extend(cb.decode(w, idx.codes(t))),
                None => {
                    let (k, v) = self
                        .full_precision_row(t)
                        .expect("unquantized tokens are stored at full precision");
                    data.extend_from_slice(if keys { k } else { v });
                }
            }
        }
        Matrix::from_vec(self.n_tokens(), self.head_dim, data).expect("shape is consistent")
    }
}
