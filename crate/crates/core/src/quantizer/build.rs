//! Prefill clustering, decode-time index appending and reconstruction error.

use serde::Serialize;

use super::codebook::{Codebook, CompressedKv, HeadSlice, PqIndices, WindowCodebook};
use super::config::PqConfig;
use super::kmeans::{weighted_kmeans, weighted_lloyd};
use crate::channel_sort::ChannelPermutation;
use crate::error::{Error, Result};
use crate::kv::KvDump;
use crate::matrix::Matrix;
use crate::rng::mix;
use crate::scalar::{squared_distance, Scalar};

const KEY_STREAM: u64 = 0;
const VALUE_STREAM: u64 = 1;

impl<T: Scalar> KvDump<T> {
    pub fn head(&self, layer: usize, head: usize) -> Result<HeadSlice<'_, T>> {
        Ok(HeadSlice {
            keys: self.keys(layer, head)?,
            values: self.values(layer, head)?,
            weights: self.weights(layer, head)?,
        })
    }
}

/// Compresses one (layer, kv-head) of a dump. Missing weights are treated as uniform.
pub fn build_compressed_kv<T: Scalar>(
    dump: &KvDump<T>,
    layer: usize,
    kv_head: usize,
    cfg: &PqConfig,
    perm_k: &ChannelPermutation,
    perm_v: &ChannelPermutation,
) -> Result<CompressedKv<T>> {
    let slice = dump.head(layer, kv_head)?;
    if slice.weights.is_none() {
        log::warn!("dump carries no importance weights; clustering with uniform weights");
    }
    compress_head(slice, cfg, perm_k, perm_v, &[layer as u64, kv_head as u64])
}

fn window_ranges(cfg: &PqConfig, start: usize, end: usize) -> Vec<(usize, usize)> {
    if start >= end {
        return Vec::new();
    }
    if cfg.window_len == 0 {
        return vec![(start, end)];
    }
    (start..end)
        .step_by(cfg.window_len)
        .map(|s| (s, (s + cfg.window_len).min(end)))
        .collect()
}

fn cluster_stream<T: Scalar>(
    x: &Matrix<T>,
    weights: &[T],
    ranges: &[(usize, usize)],
    cfg: &PqConfig,
    unit: &[u64],
) -> Result<Codebook<T>> {
    let m = cfg.m;
    let sub_dim = x.cols() / m;
    let k = ranges.first().map_or(0, |&(s, e)| cfg.k.min(e - s));
    let mut windows: Vec<WindowCodebook<T>> = Vec::with_capacity(ranges.len());
    for (wi, &(start, end)) in ranges.iter().enumerate() {
        let rows = x.slice_rows(start, end);
        let mut w = weights[start..end].to_vec();
        if w.iter().all(|v| *v == T::zero()) {
            log::warn!("window {wi} has zero total importance; using uniform weights");
            w.fill(T::one());
        }
        let mut tables = Vec::with_capacity(m);
        let mut objective: Vec<f64> = Vec::new();
        for s in 0..m {
            let points = rows.slice_cols(s * sub_dim, sub_dim);
            let result = match windows.last() {
                None => {
                    let mut key = unit.to_vec();
                    key.push(s as u64);
                    weighted_kmeans(&points, &w, k, cfg.iters, mix(&key) ^ cfg.rng_seed)?
                }
                // Later windows start from a copy of the previous window's tables.
                Some(prev) => weighted_lloyd(&points, &w, prev.tables[s].clone(), cfg.iters),
            };
            if objective.is_empty() {
                objective = result.objective_per_iter.clone();
            } else {
                for (a, b) in objective.iter_mut().zip(&result.objective_per_iter) {
                    *a += b;
                }
            }
            tables.push(result.centroids);
        }
        windows.push(WindowCodebook {
            start,
            end,
            tables,
            objective_per_iter: objective,
        });
    }
    Ok(Codebook::new(m, k, sub_dim, windows))
}

/// Compresses one head given in original channel order. `unit` keys the
/// head's random streams so heads can be processed in any order.
pub fn compress_head<T: Scalar>(
    slice: HeadSlice<'_, T>,
    cfg: &PqConfig,
    perm_k: &ChannelPermutation,
    perm_v: &ChannelPermutation,
    unit: &[u64],
) -> Result<CompressedKv<T>> {
    cfg.validate()?;
    let (n, d) = slice.keys.shape();
    if slice.values.shape() != (n, d) {
        return Err(Error::Dimension(format!(
            "keys {:?} and values {:?} differ",
            slice.keys.shape(),
            slice.values.shape()
        )));
    }
    cfg.check_head_dim(d)?;
    for (name, p) in [("perm_k", perm_k), ("perm_v", perm_v)] {
        if p.head_dim() != d || p.m() != cfg.m {
            return Err(Error::Dimension(format!(
                "{name} is for head_dim {} / m {}, data has head_dim {d} / m {}",
                p.head_dim(),
                p.m(),
                cfg.m
            )));
        }
    }
    let weights: Vec<T> = match slice.weights {
        Some(w) if w.len() != n => {
            return Err(Error::Dimension(format!("{} weights for {n} tokens", w.len())))
        }
        Some(w) => {
            crate::kv::validate_weights(w)?;
            w.to_vec()
        }
        None => vec![T::one(); n],
    };

    let kp = perm_k.apply_columns(slice.keys)?;
    let vp = perm_v.apply_columns(slice.values)?;
    let sink = cfg.sink_tokens.min(n);
    let recent = cfg.recent_tokens.min(n - sink);
    let ranges = window_ranges(cfg, sink, n - recent);

    let mut key_unit = unit.to_vec();
    key_unit.push(KEY_STREAM);
    let mut value_unit = unit.to_vec();
    value_unit.push(VALUE_STREAM);
    let key_codebook = cluster_stream(&kp, &weights, &ranges, cfg, &key_unit)?;
    let value_codebook = cluster_stream(&vp, &weights, &ranges, cfg, &value_unit)?;

    let mut key_indices = PqIndices::new(cfg.m);
    let mut value_indices = PqIndices::new(cfg.m);
    for _ in 0..n {
        key_indices.push_full_precision();
        value_indices.push_full_precision();
    }
    for (wi, &(start, end)) in ranges.iter().enumerate() {
        for t in start..end {
            key_indices.set(t, wi, &key_codebook.encode(wi, kp.row(t)));
            value_indices.set(t, wi, &value_codebook.encode(wi, vp.row(t)));
        }
    }

    Ok(CompressedKv {
        cfg: cfg.clone(),
        head_dim: d,
        perm_k: perm_k.clone(),
        perm_v: perm_v.clone(),
        key_codebook,
        value_codebook,
        key_indices,
        value_indices,
        sink_keys: kp.slice_rows(0, sink),
        sink_values: vp.slice_rows(0, sink),
        spill_keys: Matrix::zeros(0, d),
        spill_values: Matrix::zeros(0, d),
        recent_keys: kp.slice_rows(n - recent, n),
        recent_values: vp.slice_rows(n - recent, n),
    })
}

impl<T: Scalar> CompressedKv<T> {
    /// Appends one decoded token given in original channel order. The oldest
    /// recent token is evicted once the ring is full and encoded against the
    /// newest window's codebook; codebooks never change. Returns the evicted
    /// token position, if any.
    pub fn push_token(&mut self, new_k: &[T], new_v: &[T]) -> Result<Option<usize>> {
        let d = self.head_dim;
        if new_k.len() != d || new_v.len() != d {
            return Err(Error::Dimension(format!(
                "decode token of length {}/{} for head_dim {d}",
                new_k.len(),
                new_v.len()
            )));
        }
        if new_k.iter().chain(new_v).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite decode token".into()));
        }
        let k = self.perm_k.apply(new_k);
        let v = self.perm_v.apply(new_v);
        self.key_indices.push_full_precision();
        self.value_indices.push_full_precision();

        if self.sink_len() < self.cfg.sink_tokens {
            self.sink_keys.push_row(&k)?;
            self.sink_values.push_row(&v)?;
            return Ok(None);
        }
        self.recent_keys.push_row(&k)?;
        self.recent_values.push_row(&v)?;
        if self.recent_len() <= self.cfg.recent_tokens {
            return Ok(None);
        }
        let ek = self.recent_keys.pop_front_row().expect("ring is non-empty");
        let ev = self.recent_values.pop_front_row().expect("ring is non-empty");
        let token = self.n_tokens() - self.recent_len() - 1;
        if self.key_codebook.is_empty() {
            log::debug!("no codebook yet; token {token} kept at full precision");
            self.spill_keys.push_row(&ek)?;
            self.spill_values.push_row(&ev)?;
        } else {
            let w = self.key_codebook.n_windows() - 1;
            self.key_indices.set(token, w, &self.key_codebook.encode(w, &ek));
            let w = self.value_codebook.n_windows() - 1;
            self.value_indices.set(token, w, &self.value_codebook.encode(w, &ev));
        }
        Ok(Some(token))
    }
}

/// Functional form of [`CompressedKv::push_token`].
pub fn append_decode_token<T: Scalar>(
    mut ckv: CompressedKv<T>,
    new_k: &[T],
    new_v: &[T],
) -> Result<CompressedKv<T>> {
    ckv.push_token(new_k, new_v)?;
    Ok(ckv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantizationError {
    /// Mean of `‖x − x̂‖² / d` over quantized key and value rows.
    pub mse: f64,
    /// Same, with each token weighted by its importance.
    pub weighted_mse: f64,
    pub key_mse: f64,
    pub value_mse: f64,
}

/// Per-token `(key, value)` squared reconstruction error divided by `d`;
/// `None` for full-precision tokens.
pub fn token_errors<T: Scalar>(slice: HeadSlice<'_, T>, ckv: &CompressedKv<T>) -> Result<Vec<Option<(f64, f64)>>> {
    let n = ckv.n_tokens();
    if slice.keys.shape() != (n, ckv.head_dim) || slice.values.shape() != (n, ckv.head_dim) {
        return Err(Error::Dimension(format!(
            "slice {:?} against a compressed cache of {n} x {}",
            slice.keys.shape(),
            ckv.head_dim
        )));
    }
    let d = ckv.head_dim.max(1) as f64;
    Ok((0..n)
        .map(|t| {
            let kw = ckv.key_indices.window(t)?;
            let vw = ckv.value_indices.window(t)?;
            let kx = ckv.perm_k.apply(slice.keys.row(t));
            let vx = ckv.perm_v.apply(slice.values.row(t));
            let kh = ckv.key_codebook.decode(kw, ckv.key_indices.codes(t));
            let vh = ckv.value_codebook.decode(vw, ckv.value_indices.codes(t));
            Some((
                squared_distance(&kx, &kh).to_f64_lossy() / d,
                squared_distance(&vx, &vh).to_f64_lossy() / d,
            ))
        })
        .collect())
}

pub fn quantization_error<T: Scalar>(slice: HeadSlice<'_, T>, ckv: &CompressedKv<T>) -> Result<QuantizationError> {
    let errs = token_errors(slice, ckv)?;
    let (mut ks, mut vs, mut ws, mut wsum, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (t, e) in errs.iter().enumerate() {
        if let Some((ke, ve)) = e {
            let w = slice.weights.map_or(1.0, |w| w[t].to_f64_lossy());
            ks += ke;
            vs += ve;
            ws += w * (ke + ve) / 2.0;
            wsum += w;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NothingQuantized);
    }
    let c = count as f64;
    Ok(QuantizationError {
        mse: (ks + vs) / (2.0 * c),
        weighted_mse: if wsum > 0.0 { ws / wsum } else { 0.0 },
        key_mse: ks / c,
        value_mse: vs / c,
    })
}
