#![allow(dead_code)]

use aqpim_core::rng::stream;
use aqpim_core::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = stream(seed, &[0xBEEF]);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn gaussian32(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    gaussian(rows, cols, seed).map(|v| v as f32)
}

pub fn gaussian_vec(n: usize, seed: u64) -> Vec<f64> {
    gaussian(1, n, seed).into_vec()
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[0xF00D]);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

/// Independent naive attention in f64: explicit loops, no shared helpers.
pub fn naive_attention(q: &[f64], keys: &Matrix<f64>, vals: &Matrix<f64>, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = keys.rows();
    let mut logits = vec![0.0; n];
    for t in 0..n {
        let mut s = 0.0;
        for c in 0..q.len() {
            s += q[c] * keys[(t, c)];
        }
        logits[t] = s * scale;
    }
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut out = vec![0.0; vals.cols()];
    for t in 0..n {
        for c in 0..vals.cols() {
            out[c] += p[t] * vals[(t, c)];
        }
    }
    (out, p)
}
