//! Exact softmax attention and attention computed on the compressed cache by
//! inner-product table lookup.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantizer::{Codebook, CompressedKv, HeadSlice};
use crate::rng::{stream, tag};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Exact32,
    /// Round every table entry, partial sum and probability to IEEE half.
    Round16,
}

impl Rounding {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Rounding::Exact32 => v,
            Rounding::Round16 => v.round_f16(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub out: Vec<T>,
    pub scores: Option<Vec<T>>,
}

pub fn default_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::from_usize(head_dim.max(1)).expect("usize fits").sqrt()
}

fn softmax<T: Scalar>(logits: &[T], scale: T, r: Rounding) -> Vec<T> {
    let scaled: Vec<T> = logits.iter().map(|&l| r.apply(l * scale)).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&l| r.apply((l - max).exp())).collect();
    let mut z = T::zero();
    for &e in &exps {
        z = r.apply(z + e);
    }
    exps.into_iter().map(|e| r.apply(e / z)).collect()
}

/// `softmax(q·Kᵀ·scale)·V`.
pub fn exact_attention<T: Scalar>(q: &[T], keys: &Matrix<T>, vals: &Matrix<T>, scale: T) -> Result<AttentionOutput<T>> {
    if q.len() != keys.cols() || keys.shape() != vals.shape() {
        return Err(Error::Dimension(format!(
            "q of length {} against keys {:?} and values {:?}",
            q.len(),
            keys.shape(),
            vals.shape()
        )));
    }
    if keys.rows() == 0 {
        return Ok(AttentionOutput {
            out: vec![T::zero(); vals.cols()],
            scores: Some(Vec::new()),
        });
    }
    let logits = keys.matvec(q)?;
    let scores = softmax(&logits, scale, Rounding::Exact32);
    let out = vals.vecmat(&scores)?;
    Ok(AttentionOutput {
        out,
        scores: Some(scores),
    })
}

/// `⟨q_s, c_{s,j}⟩` for every window `w`, subvector `s` and centroid `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProductTable<T> {
    entries: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> InnerProductTable<T> {
    pub fn build(q: &[T], codebook: &Codebook<T>, rounding: Rounding) -> Self {
        let g = codebook.sub_dim();
        let entries = (0..codebook.n_windows())
            .map(|w| {
                (0..codebook.m())
                    .map(|s| {
                        let qs = &q[s * g..(s + 1) * g];
                        codebook
                            .table(w, s)
                            .iter_rows()
                            .map(|c| rounding.apply(dot(qs, c)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, window: usize, sub: usize, idx: u16) -> T {
        self.entries[window][sub][idx as usize]
    }

    pub fn row(&self, window: usize, sub: usize) -> &[T] {
        &self.entries[window][sub]
    }
}

/// Unscaled `q·k̂` per token: table lookups summed over subvectors for quantized
/// tokens, exact dot products for full-precision ones. `q` is in the cache's
/// permuted key order.
pub fn pq_logits<T: Scalar>(q: &[T], ckv: &CompressedKv<T>, rounding: Rounding) -> Result<Vec<T>> {
    if q.len() != ckv.head_dim() {
        return Err(Error::Dimension(format!(
            "q of length {} for head_dim {}",
            q.len(),
            ckv.head_dim()
        )));
    }
    let table = InnerProductTable::build(q, ckv.key_codebook(), rounding);
    let idx = ckv.key_indices();
    Ok((0..ckv.n_tokens())
        .map(|t| match idx.window(t) {
            Some(w) => {
                let mut acc = T::zero();
                for (s, &c) in idx.codes(t).iter().enumerate() {
                    acc = rounding.apply(acc + table.get(w, s, c));
                }
                acc
            }
            None => {
                let (k, _) = ckv.full_precision_row(t).expect("stored at full precision");
                rounding.apply(dot(q, k))
            }
        })
        .collect())
}

/// Attention over the compressed cache. `q` and the returned output are in the
/// cache's permuted key and value orders respectively.
pub fn pq_attention<T: Scalar>(q: &[T], ckv: &CompressedKv<T>, scale: T, rounding: Rounding) -> Result<AttentionOutput<T>> {
    let d = ckv.head_dim();
    let logits = pq_logits(q, ckv, rounding)?;
    if logits.is_empty() {
        return Ok(AttentionOutput {
            out: vec![T::zero(); d],
            scores: Some(Vec::new()),
        });
    }
    let scores = softmax(&logits, scale, rounding);
    let vidx = ckv.value_indices();
    let vcb = ckv.value_codebook();
    let mut out = vec![T::zero(); d];
    let mut row = Vec::with_capacity(d);
    for (t, &p) in scores.iter().enumerate() {
        row.clear();
        match vidx.window(t) {
            Some(w) => row.extend(vcb.decode(w, vidx.codes(t))),
            None => row.extend_from_slice(ckv.full_precision_row(t).expect("stored at full precision").1),
        }
        for (o, &v) in out.iter_mut().zip(&row) {
            *o = rounding.apply(*o + p * v);
        }
    }
    Ok(AttentionOutput {
        out,
        scores: Some(scores),
    })
}

/// Maps an output from the cache's value order back to original channel order.
pub fn unpermute_output<T: Scalar>(ckv: &CompressedKv<T>, out: &[T]) -> Vec<T> {
    ckv.perm_v().inverse().iter().map(|&j| out[j]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    /// Mean L1 distance between exact and compressed score vectors.
    pub score_l1: f64,
    /// Mean cosine similarity between exact and compressed outputs.
    pub output_cos: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

/// Compares exact and compressed attention for `n_queries` queries drawn near
/// random keys of the head (each key row plus Gaussian noise at half the
/// per-channel standard deviation).
pub fn attention_fidelity<T: Scalar>(
    slice: HeadSlice<'_, T>,
    ckv: &CompressedKv<T>,
    n_queries: usize,
    rng_seed: u64,
) -> Result<Fidelity> {
    let (n, d) = slice.keys.shape();
    if n == 0 || n != ckv.n_tokens() || d != ckv.head_dim() {
        return Err(Error::Dimension(format!(
            "slice {:?} against a compressed cache of {} x {}",
            slice.keys.shape(),
            ckv.n_tokens(),
            ckv.head_dim()
        )));
    }
    if n_queries == 0 {
        return Err(Error::Invalid("n_queries must be positive".into()));
    }
    let std: Vec<f64> = (0..d)
        .map(|c| {
            let col: Vec<f64> = slice.keys.column(c).iter().map(|v| v.to_f64_lossy()).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();
    let scale = default_scale::<T>(d);
    let mut rng = stream(rng_seed, &[tag::QUERIES]);
    let (mut l1_sum, mut cos_sum) = (0.0, 0.0);
    for _ in 0..n_queries {
        let anchor = slice.keys.row(rng.random_range(0..n));
        let q: Vec<T> = anchor
            .iter()
            .zip(&std)
            .map(|(&k, &s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64_lossy(k.to_f64_lossy() + 0.5 * s * z)
            })
            .collect();
        let exact = exact_attention(&q, slice.keys, slice.values, scale)?;
        let approx = pq_attention(&ckv.perm_k().apply(&q), ckv, scale, Rounding::Exact32)?;
        let approx_out = unpermute_output(ckv, &approx.out);

        let es = exact.scores.expect("materialized");
        let as_ = approx.scores.expect("materialized");
        l1_sum += es
            .iter()
            .zip(&as_)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .sum::<f64>();
        let eo: Vec<f64> = exact.out.iter().map(|v| v.to_f64_lossy()).collect();
        let ao: Vec<f64> = approx_out.iter().map(|v| v.to_f64_lossy()).collect();
        cos_sum += cosine(&eo, &ao);
    }
    Ok(Fidelity {
        score_l1: l1_sum / n_queries as f64,
        output_cos: cos_sum / n_queries as f64,
    })
}
