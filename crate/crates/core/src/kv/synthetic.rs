//! Synthetic KV caches with clustered tokens and block-correlated channels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::KvDump;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, tag, StreamRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "one")]
    pub n_layers: usize,
    #[serde(default = "one")]
    pub n_kv_heads: usize,
    pub n_tokens: usize,
    pub head_dim: usize,
    pub n_latent_clusters: usize,
    pub cluster_spread: f64,
    pub rng_seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    pub fn new(
        n_tokens: usize,
        head_dim: usize,
        n_latent_clusters: usize,
        cluster_spread: f64,
        rng_seed: u64,
    ) -> Self {
        Self {
            n_layers: 1,
            n_kv_heads: 1,
            n_tokens,
            head_dim,
            n_latent_clusters,
            cluster_spread,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latent_clusters > self.n_tokens {
            return Err(Error::Invalid(format!(
                "{} latent clusters for {} tokens",
                self.n_latent_clusters, self.n_tokens
            )));
        }
        if self.n_latent_clusters == 0 && self.n_tokens > 0 {
            return Err(Error::Invalid("need at least one latent cluster".into()));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0) {
            return Err(Error::Invalid(format!(
                "cluster_spread must be finite and nonnegative, got {}",
                self.cluster_spread
            )));
        }
        Ok(())
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

fn clustered_matrix<T: Scalar>(spec: &SyntheticSpec, layer: u64, head: u64, stream_tag: u64) -> Matrix<T> {
    let c = spec.n_latent_clusters;
    let d = spec.head_dim;
    let mut centers_rng = stream(spec.rng_seed, &[tag::SYNTH_CENTERS, stream_tag, layer, head]);
    let centers: Vec<f64> = (0..c * d).map(|_| normal(&mut centers_rng)).collect();

    let mut data = Vec::with_capacity(spec.n_tokens * d);
    for t in 0..spec.n_tokens {
        let mut rng = stream(spec.rng_seed, &[stream_tag, layer, head, t as u64]);
        // Each cluster is represented at least once; the rest are drawn uniformly.
        let cluster = if t < c { t } else { rng.random_range(0..c) };
        let center = &centers[cluster * d..(cluster + 1) * d];
        for &mu in center {
            let x = if spec.cluster_spread > 0.0 {
                mu + spec.cluster_spread * normal(&mut rng)
            } else {
                mu
            };
            data.push(T::from_f64_lossy(x));
        }
    }
    Matrix::from_vec(spec.n_tokens, d, data).expect("generated values are finite")
}

/// Tokens drawn around latent centers with isotropic Gaussian noise. Keys and values
/// use independent centers and independent cluster draws.
pub fn generate_synthetic_kv<T: Scalar>(spec: &SyntheticSpec) -> Result<KvDump<T>> {
    spec.validate()?;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for layer in 0..spec.n_layers as u64 {
        for head in 0..spec.n_kv_heads as u64 {
            keys.push(clustered_matrix(spec, layer, head, tag::SYNTH_KEY));
            values.push(clustered_matrix(spec, layer, head, tag::SYNTH_VALUE));
        }
    }
    KvDump::new(spec.n_layers, spec.n_kv_heads, keys, values, None)
}

/// Unit weights with `heavy_fraction` of tokens (at least one) boosted by `factor`.
/// Returns the weights and the sorted heavy-token indices.
pub fn heavy_token_weights<T: Scalar>(
    n_tokens: usize,
    heavy_fraction: f64,
    factor: f64,
    seed: u64,
) -> (Vec<T>, Vec<usize>) {
    let n_heavy = ((n_tokens as f64 * heavy_fraction).round() as usize).clamp(1, n_tokens.max(1));
    let mut idx: Vec<usize> = (0..n_tokens).collect();
    idx.shuffle(&mut stream(seed, &[tag::HEAVY]));
    let mut heavy: Vec<usize> = idx.into_iter().take(n_heavy.min(n_tokens)).collect();
    heavy.sort_unstable();
    let mut w = vec![T::one(); n_tokens];
    for &i in &heavy {
        w[i] = T::from_f64_lossy(factor);
    }
    (w, heavy)
}

/// Channels that come in correlated blocks scattered across the head dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockChannelSpec {
    pub n_tokens: usize,
    pub head_dim: usize,
    /// Channels per correlated block; must divide `head_dim`.
    pub block_size: usize,
    /// Independent per-channel noise relative to the shared block factor.
    pub noise: f64,
    pub rng_seed: u64,
}

/// Returns the activations and, for each channel, the block it belongs to.
pub fn generate_block_channels<T: Scalar>(spec: &BlockChannelSpec) -> Result<(Matrix<T>, Vec<usize>)> {
    if spec.block_size == 0 || !spec.head_dim.is_multiple_of(spec.block_size) {
        return Err(Error::Invalid(format!(
            "block size {} does not divide head_dim {}",
            spec.block_size, spec.head_dim
        )));
    }
    let d = spec.head_dim;
    let mut rng = stream(spec.rng_seed, &[tag::BLOCKS]);
    let mut slots: Vec<usize> = (0..d).collect();
    slots.shuffle(&mut rng);
    let block_of: Vec<usize> = slots.iter().map(|&s| s / spec.block_size).collect();
    let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();

    let n_blocks = d / spec.block_size;
    let mut data = Vec::with_capacity(spec.n_tokens * d);
    for t in 0..spec.n_tokens {
        let mut trng = stream(spec.rng_seed, &[tag::BLOCKS, t as u64]);
        let z: Vec<f64> = (0..n_blocks).map(|_| normal(&mut trng)).collect();
        for c in 0..d {
            let x = gain[c] * z[block_of[c]] + spec.noise * normal(&mut trng);
            data.push(T::from_f64_lossy(x));
        }
    }
    Ok((Matrix::from_vec(spec.n_tokens, d, data)?, block_of))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_repeats_centers() {
        let spec = SyntheticSpec::new(50, 8, 5, 0.0, 3);
        let d: KvDump<f32> = generate_synthetic_kv(&spec).unwrap();
        let k = d.keys(0, 0).unwrap();
        let mut distinct: Vec<Vec<u32>> = k
            .iter_rows()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn deterministic_and_rejects_bad_spec() {
        let spec = SyntheticSpec::new(20, 4, 3, 0.5, 11);
        let a: KvDump<f64> = generate_synthetic_kv(&spec).unwrap();
        let b: KvDump<f64> = generate_synthetic_kv(&spec).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic_kv::<f32>(&SyntheticSpec::new(2, 4, 3, 0.5, 0)).is_err());
        assert!(generate_synthetic_kv::<f32>(&SyntheticSpec::new(4, 4, 3, -1.0, 0)).is_err());
    }

    #[test]
    fn heavy_weights_count() {
        let (w, heavy) = heavy_token_weights::<f32>(200, 0.05, 100.0, 1);
        assert_eq!(heavy.len(), 10);
        assert_eq!(w.iter().filter(|&&v| v == 100.0).count(), 10);
    }

    #[test]
    fn block_channels_share_factor() {
        let spec = BlockChannelSpec {
            n_tokens: 400,
            head_dim: 8,
            block_size: 4,
            noise: 0.0,
            rng_seed: 2,
        };
        let (m, block_of) = generate_block_channels::<f64>(&spec).unwrap();
        let a = (0..8).find(|&c| block_of[c] == 0).unwrap();
        let b = (0..8).rfind(|&c| block_of[c] == 0).unwrap();
        // Noise-free channels in one block are exact multiples of each other.
        let ratio = m[(0, a)] / m[(0, b)];
        for r in 1..10 {
            assert!((m[(r, a)] / m[(r, b)] - ratio).abs() < 1e-9);
        }
    }
}
