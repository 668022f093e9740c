//! Importance weights: attention mass each token receives from the last `t` queries.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, Scalar};

/// `w[j] = Σ_{i ≥ N - t} S[i][j]` over the post-softmax score matrix `S`.
pub fn compute_importance_weights<T: Scalar>(s: &Matrix<T>, t: usize) -> Result<Vec<T>> {
    let n = s.rows();
    if t > n {
        return Err(Error::Invalid(format!("t = {t} exceeds {n} score rows")));
    }
    let mut w = vec![T::zero(); s.cols()];
    for row in (n - t..n).map(|i| s.row(i)) {
        for (acc, &v) in w.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(w)
}

/// Causal post-softmax scores of `queries` against `keys` (token `i` sees `0..=i`).
pub fn causal_scores<T: Scalar>(queries: &Matrix<T>, keys: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    if queries.shape() != keys.shape() {
        return Err(Error::Dimension(format!(
            "queries {:?} against keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    let n = keys.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let q = queries.row(i);
        let logits: Vec<T> = (0..=i).map(|j| dot(q, keys.row(j)) * scale).collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        for (j, e) in exps.into_iter().enumerate() {
            s[(i, j)] = e / z;
        }
    }
    Ok(s)
}

/// Sums per-query-head weights into their shared KV head. Query heads
/// `g * group .. (g + 1) * group` map to KV head `g`.
pub fn aggregate_gqa<T: Scalar>(per_query_head: &[Vec<T>], n_kv_heads: usize) -> Result<Vec<Vec<T>>> {
    let nq = per_query_head.len();
    if n_kv_heads == 0 || !nq.is_multiple_of(n_kv_heads) {
        return Err(Error::Invalid(format!(
            "{nq} query heads cannot be grouped onto {n_kv_heads} KV heads"
        )));
    }
    let group = nq / n_kv_heads;
    per_query_head
        .chunks(group)
        .map(|heads| {
            let n = heads[0].len();
            if heads.iter().any(|h| h.len() != n) {
                return Err(Error::Dimension("weight vectors differ in length".into()));
            }
            Ok((0..n).map(|j| heads.iter().map(|h| h[j]).sum()).collect())
        })
        .collect()
}
