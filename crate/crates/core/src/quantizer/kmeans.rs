//! Importance-weighted k-means: centroids are weighted means of their members.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::validate_weights;
use crate::matrix::Matrix;
use crate::rng::{stream, tag};
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    /// Assignment made in the last round (before that round's centroid update).
    pub assignments: Vec<u32>,
    /// `Σ w_n ‖x_n − μ_{a(n)}‖²` after each round.
    pub objective_per_iter: Vec<f64>,
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
#[inline]
pub fn nearest<T: Scalar>(x: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Seeding with probability proportional to `w_n · D(x_n)²`; the first centroid is
/// drawn proportional to `w_n`. If all remaining mass is zero, the lowest-index
/// unchosen point is taken.
pub fn kmeans_pp_init<T: Scalar>(points: &Matrix<T>, weights: &[T], k: usize, rng: &mut impl Rng) -> Matrix<T> {
    let n = points.rows();
    let d = points.cols();
    let mut chosen = vec![false; n];
    let mut centroids = Matrix::zeros(0, d);
    let mut mass: Vec<f64> = weights.iter().map(|w| w.to_f64_lossy()).collect();
    let w64 = mass.clone();
    let mut dist = vec![f64::INFINITY; n];

    for _ in 0..k {
        let total: f64 = mass.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &p) in mass.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last_positive = i;
                    if acc > r {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = points.row(pick).to_vec();
        for i in 0..n {
            let di = squared_distance(points.row(i), &c).to_f64_lossy();
            if di < dist[i] {
                dist[i] = di;
            }
            mass[i] = if chosen[i] { 0.0 } else { w64[i] * dist[i] };
        }
        centroids.push_row(&c).expect("rows share the point width");
    }
    if d == 0 {
        return Matrix::zeros(k, 0);
    }
    centroids
}

/// Lloyd rounds from a given initialization. Clusters with no weighted mass are
/// repaired by moving their centroid onto the point with the largest weighted
/// distance to its assigned centroid (each point used at most once per round);
/// if no such point remains the centroid is kept.
pub fn weighted_lloyd<T: Scalar>(points: &Matrix<T>, weights: &[T], init: Matrix<T>, iters: usize) -> KMeansResult<T> {
    let n = points.rows();
    let d = points.cols();
    let k = init.rows();
    let w: Vec<f64> = weights.iter().map(|v| v.to_f64_lossy()).collect();
    let mut centroids = init;
    let mut assignments = vec![0u32; n];
    let mut dists = vec![0f64; n];
    let mut objective_per_iter = Vec::with_capacity(iters);

    for _ in 0..iters {
        for i in 0..n {
            let (j, dj) = nearest(points.row(i), &centroids);
            assignments[i] = j as u32;
            dists[i] = dj.to_f64_lossy();
        }

        let mut sums = vec![0f64; k * d];
        let mut mass = vec![0f64; k];
        for i in 0..n {
            let a = assignments[i] as usize;
            mass[a] += w[i];
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += w[i] * x.to_f64_lossy();
            }
        }

        let mut used = vec![false; n];
        for j in 0..k {
            if mass[j] > 0.0 {
                for (c, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *c = T::from_f64_lossy(s / mass[j]);
                }
                continue;
            }
            let mut far = None;
            let mut far_d = 0.0;
            for i in 0..n {
                let wd = w[i] * dists[i];
                if !used[i] && wd > far_d {
                    far = Some(i);
                    far_d = wd;
                }
            }
            if let Some(i) = far {
                used[i] = true;
                centroids.row_mut(j).copy_from_slice(points.row(i));
            }
        }

        let mut obj = 0f64;
        for i in 0..n {
            let a = assignments[i] as usize;
            obj += w[i] * squared_distance(points.row(i), centroids.row(a)).to_f64_lossy();
        }
        objective_per_iter.push(obj);
    }

    if iters == 0 {
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centroids).0 as u32;
        }
    }
    KMeansResult {
        centroids,
        assignments,
        objective_per_iter,
    }
}

/// k-means++ seeding followed by `iters` weighted Lloyd rounds.
pub fn weighted_kmeans<T: Scalar>(
    points: &Matrix<T>,
    weights: &[T],
    k: usize,
    iters: usize,
    rng_seed: u64,
) -> Result<KMeansResult<T>> {
    let n = points.rows();
    if weights.len() != n {
        return Err(Error::Dimension(format!("{} weights for {n} points", weights.len())));
    }
    if n == 0 {
        return Err(Error::Invalid("no points to cluster".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be positive".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    validate_weights(weights)?;
    let mut rng = stream(rng_seed, &[tag::KMEANS]);
    let init = kmeans_pp_init(points, weights, k, &mut rng);
    Ok(weighted_lloyd(points, weights, init, iters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_point_its_own_centroid() {
        let p = Matrix::<f64>::from_vec(4, 2, vec![0., 0., 1., 0., 0., 1., 5., 5.]).unwrap();
        let r = weighted_kmeans(&p, &[1.0; 4], 4, 2, 9).unwrap();
        assert_eq!(*r.objective_per_iter.last().unwrap(), 0.0);
    }

    #[test]
    fn heavy_group_dominates_single_centroid() {
        let p = Matrix::<f64>::from_vec(4, 1, vec![0., 1., 100., 101.]).unwrap();
        let w = [1.0, 1.0, 1000.0, 1000.0];
        let r = weighted_kmeans(&p, &w, 1, 1, 0).unwrap();
        let expected = (0.0 + 1.0 + 1000.0 * 201.0) / 2002.0;
        assert!((r.centroids[(0, 0)] - expected).abs() < 1e-12);
        assert!((r.centroids[(0, 0)] - 100.5).abs() / 100.5 < 1e-3);
    }

    #[test]
    fn errors() {
        let p = Matrix::<f32>::from_vec(2, 1, vec![0., 1.]).unwrap();
        assert!(matches!(weighted_kmeans(&p, &[0.0, 0.0], 1, 1, 0), Err(Error::ZeroWeights)));
        assert!(matches!(weighted_kmeans(&p, &[1.0, 1.0], 3, 1, 0), Err(Error::TooManyClusters { k: 3, n: 2 })));
        assert!(weighted_kmeans(&p, &[1.0, -1.0], 1, 1, 0).is_err());
    }

    #[test]
    fn ties_go_low() {
        let c = Matrix::<f32>::from_vec(2, 1, vec![-1., 1.]).unwrap();
        assert_eq!(nearest(&[0.0], &c).0, 0);
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // Duplicate initial centroids leave cluster 1 empty in the first round.
        let p = Matrix::<f64>::from_vec(3, 1, vec![0., 0., 10.]).unwrap();
        let init = Matrix::from_vec(2, 1, vec![0., 0.]).unwrap();
        let r = weighted_lloyd(&p, &[1.0; 3], init, 2);
        assert_eq!(*r.objective_per_iter.last().unwrap(), 0.0);
    }
}
