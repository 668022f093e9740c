//! Greedy cosine grouping of channels into subvectors, and folding the resulting
//! permutations into the attention projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, tag};
use crate::scalar::Scalar;

/// `order[j]` is the source channel placed at position `j`; positions
/// `[s * d/m, (s + 1) * d/m)` form subvector `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPermutation")]
pub struct ChannelPermutation {
    order: Vec<usize>,
    m: usize,
}

#[derive(Deserialize)]
struct RawPermutation {
    order: Vec<usize>,
    m: usize,
}

impl TryFrom<RawPermutation> for ChannelPermutation {
    type Error = Error;
    fn try_from(raw: RawPermutation) -> Result<Self> {
        Self::new(raw.order, raw.m)
    }
}

impl ChannelPermutation {
    pub fn new(order: Vec<usize>, m: usize) -> Result<Self> {
        let d = order.len();
        if m == 0 || !d.is_multiple_of(m) {
            return Err(Error::Invalid(format!(
                "head_dim {d} is not divisible by m = {m}"
            )));
        }
        let mut seen = vec![false; d];
        for &c in &order {
            if c >= d || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Invalid(format!(
                    "order is not a permutation of 0..{d}"
                )));
            }
        }
        Ok(Self { order, m })
    }

    pub fn identity(head_dim: usize, m: usize) -> Result<Self> {
        Self::new((0..head_dim).collect(), m)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn head_dim(&self) -> usize {
        self.order.len()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// Channels forming subvector `s`.
    pub fn group(&self, s: usize) -> &[usize] {
        let g = self.order.len() / self.m;
        &self.order[s * g..(s + 1) * g]
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (j, &c) in self.order.iter().enumerate() {
            inv[c] = j;
        }
        inv
    }

    /// Reorders a single vector: `out[j] = v[order[j]]`.
    pub fn apply<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.order.iter().map(|&c| v[c]).collect()
    }

    /// Reorders the columns of a token matrix.
    pub fn apply_columns<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.head_dim() {
            return Err(Error::Dimension(format!(
                "{} columns against a permutation of {}",
                x.cols(),
                self.head_dim()
            )));
        }
        Ok(x.select_columns(&self.order))
    }
}

/// Channels whose calibration column is identically zero.
pub fn zero_channels<T: Scalar>(samples: &Matrix<T>) -> Vec<usize> {
    (0..samples.cols())
        .filter(|&c| samples.iter_rows().all(|r| r[c] == T::zero()))
        .collect()
}

/// Builds `m` groups: a seeded random unassigned reference channel plus its
/// `d/m - 1` most cosine-similar unassigned channels. Ties go to the lower index.
pub fn sort_channels<T: Scalar>(samples: &Matrix<T>, m: usize, rng_seed: u64) -> Result<ChannelPermutation> {
    let d = samples.cols();
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::Invalid(format!(
            "head_dim {d} is not divisible by m = {m}"
        )));
    }
    let zero = zero_channels(samples);
    if !zero.is_empty() {
        log::warn!("all-zero calibration channels {zero:?}: treated as similarity 0");
    }

    let cols: Vec<Vec<f64>> = (0..d)
        .map(|c| samples.column(c).into_iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let cosine = |a: usize, b: usize| -> f64 {
        if norms[a] == 0.0 || norms[b] == 0.0 {
            return 0.0;
        }
        let dot: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
        dot / (norms[a] * norms[b])
    };

    let g = d / m;
    let mut rng = stream(rng_seed, &[tag::SORT]);
    let mut unassigned: Vec<usize> = (0..d).collect();
    let mut order = Vec::with_capacity(d);
    for _ in 0..m {
        let reference = unassigned.remove(rng.random_range(0..unassigned.len()));
        let mut ranked: Vec<(f64, usize)> = unassigned.iter().map(|&c| (cosine(reference, c), c)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.push(reference);
        let picked: Vec<usize> = ranked.iter().take(g - 1).map(|&(_, c)| c).collect();
        order.extend_from_slice(&picked);
        unassigned.retain(|c| !picked.contains(c));
    }
    ChannelPermutation::new(order, m)
}

fn permute_column_blocks<T: Scalar>(w: &Matrix<T>, p: &ChannelPermutation, name: &str) -> Result<Matrix<T>> {
    let d = p.head_dim();
    if d == 0 || !w.cols().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{name} has {} columns, not a multiple of head_dim {d}",
            w.cols()
        )));
    }
    let order: Vec<usize> = (0..w.cols() / d)
        .flat_map(|h| p.order().iter().map(move |&c| h * d + c))
        .collect();
    Ok(w.select_columns(&order))
}

fn permute_row_blocks<T: Scalar>(w: &Matrix<T>, p: &ChannelPermutation, name: &str) -> Result<Matrix<T>> {
    let d = p.head_dim();
    if d == 0 || !w.rows().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{name} has {} rows, not a multiple of head_dim {d}",
            w.rows()
        )));
    }
    let order: Vec<usize> = (0..w.rows() / d)
        .flat_map(|h| p.order().iter().map(move |&c| h * d + c))
        .collect();
    Ok(w.select_rows(&order))
}

/// `W_q`, `W_k`, `W_v`, `W_o`.
pub type Projections<T> = (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>);

/// Folds the permutations into the projections. Projections act on row vectors
/// (`q = x · W_q`), with every head's `head_dim` block permuted alike:
/// `W_q` and `W_k` get `P_k` on their columns, `W_v` gets `P_v` on its columns and
/// `W_o` gets `P_vᵀ` on its rows, so attention scores and the block output are unchanged.
pub fn absorb_permutation<T: Scalar>(
    wq: &Matrix<T>,
    wk: &Matrix<T>,
    wv: &Matrix<T>,
    wo: &Matrix<T>,
    pk: &ChannelPermutation,
    pv: &ChannelPermutation,
) -> Result<Projections<T>> {
    Ok((
        permute_column_blocks(wq, pk, "W_q")?,
        permute_column_blocks(wk, pk, "W_k")?,
        permute_column_blocks(wv, pv, "W_v")?,
        permute_row_blocks(wo, pv, "W_o")?,
    ))
}
