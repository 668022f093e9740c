//! Dump → channel sort → quantize → measure, without any file handling.

use std::fmt;
use std::str::FromStr;

use aqpim_core::attention::attention_fidelity;
use aqpim_core::channel_sort::{sort_channels, ChannelPermutation};
use aqpim_core::kv::KvDump;
use aqpim_core::quantizer::{compress_head, quantization_error, CompressedKv, HeadSlice, PqConfig};
use aqpim_core::rng::mix;
use aqpim_core::{Error, Scalar};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Sub-stream tags under `--seed`.
const FIDELITY_STREAM: u64 = 0xF1DE;

/// Ablation arms: plain PQ, each ingredient removed from the full method, and the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Standard,
    NoWeighting,
    NoPresort,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Standard, Arm::NoWeighting, Arm::NoPresort, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Standard => "standard",
            Arm::NoWeighting => "no-weighting",
            Arm::NoPresort => "no-presort",
            Arm::Full => "full",
        }
    }

    pub fn presort(self) -> bool {
        matches!(self, Arm::NoWeighting | Arm::Full)
    }

    pub fn weighted(self) -> bool {
        matches!(self, Arm::NoPresort | Arm::Full)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown fidelity arm {s:?}")))
    }
}

/// Channel permutations for one head: sorted on the head's own keys and values, or identity.
pub fn head_permutations<T: Scalar>(
    slice: HeadSlice<'_, T>,
    m: usize,
    presort: bool,
    seed: u64,
) -> CliResult<(ChannelPermutation, ChannelPermutation)> {
    let d = slice.keys.cols();
    if presort {
        Ok((
            sort_channels(slice.keys, m, seed)?,
            sort_channels(slice.values, m, mix(&[seed, 1]))?,
        ))
    } else {
        let id = ChannelPermutation::identity(d, m)?;
        Ok((id.clone(), id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub n_quantized: usize,
    pub n_windows: usize,
    /// `None` when every token stayed at full precision.
    pub mse: Option<f64>,
    pub weighted_mse: Option<f64>,
    pub key_mse: Option<f64>,
    pub value_mse: Option<f64>,
    pub key_objectives: Vec<Vec<f64>>,
    pub value_objectives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeSummary {
    pub config: PqConfig,
    pub presort: bool,
    pub n_tokens: usize,
    pub head_dim: usize,
    pub compression_factor: f64,
    pub index_bits: u32,
    /// Means over heads with quantized tokens.
    pub mse: Option<f64>,
    pub weighted_mse: Option<f64>,
    pub heads: Vec<HeadSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Compresses every (layer, head) in `heads`. Returns the caches in the same order.
pub fn quantize_dump<T: Scalar>(
    dump: &KvDump<T>,
    cfg: &PqConfig,
    presort: bool,
    heads: &[(usize, usize)],
) -> CliResult<(QuantizeSummary, Vec<CompressedKv<T>>)> {
    cfg.validate()?;
    cfg.check_head_dim(dump.head_dim())?;
    let mut caches = Vec::with_capacity(heads.len());
    let mut rows = Vec::with_capacity(heads.len());
    for &(layer, head) in heads {
        let slice = dump.head(layer, head)?;
        let (pk, pv) = head_permutations(slice, cfg.m, presort, mix(&[cfg.rng_seed, layer as u64, head as u64]))?;
        let ckv = compress_head(slice, cfg, &pk, &pv, &[layer as u64, head as u64])?;
        let err = match quantization_error(slice, &ckv) {
            Ok(e) => Some(e),
            Err(Error::NothingQuantized) => None,
            Err(e) => return Err(e.into()),
        };
        let objectives = |cb: &aqpim_core::quantizer::Codebook<T>| {
            cb.windows().iter().map(|w| w.objective_per_iter.clone()).collect()
        };
        rows.push(HeadSummary {
            layer,
            head,
            n_quantized: ckv.n_quantized(),
            n_windows: ckv.key_codebook().n_windows(),
            mse: err.map(|e| e.mse),
            weighted_mse: err.map(|e| e.weighted_mse),
            key_mse: err.map(|e| e.key_mse),
            value_mse: err.map(|e| e.value_mse),
            key_objectives: objectives(ckv.key_codebook()),
            value_objectives: objectives(ckv.value_codebook()),
        });
        caches.push(ckv);
    }
    let acct = cfg.compression(dump.n_tokens(), dump.head_dim());
    let summary = QuantizeSummary {
        config: cfg.clone(),
        presort,
        n_tokens: dump.n_tokens(),
        head_dim: dump.head_dim(),
        compression_factor: acct.factor,
        index_bits: acct.index_bits,
        mse: mean(rows.iter().filter_map(|r| r.mse)),
        weighted_mse: mean(rows.iter().filter_map(|r| r.weighted_mse)),
        heads: rows,
    };
    Ok((summary, caches))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub arm: Arm,
    pub seed: usize,
    pub score_l1: f64,
    pub output_cos: f64,
    pub weighted_mse: f64,
}

/// One row per arm × seed, each averaged over all heads of the dump. Seed `i`
/// drives clustering, channel grouping and the probe queries identically for
/// every arm, so arms are compared on the same draws. The weighted error is
/// always measured with the dump's own weights.
pub fn fidelity_rows<T: Scalar>(
    dump: &KvDump<T>,
    cfg: &PqConfig,
    arms: &[Arm],
    seeds: usize,
    queries: usize,
    seed: u64,
) -> CliResult<Vec<FidelityRow>> {
    cfg.validate()?;
    cfg.check_head_dim(dump.head_dim())?;
    let mut out = Vec::with_capacity(arms.len() * seeds);
    for &arm in arms {
        for i in 0..seeds {
            let s = mix(&[seed, FIDELITY_STREAM, i as u64]);
            let run_cfg = PqConfig {
                rng_seed: s,
                ..cfg.clone()
            };
            let (mut l1, mut cos, mut wmse) = (0.0, 0.0, 0.0);
            let units = dump.n_layers() * dump.n_kv_heads();
            for layer in 0..dump.n_layers() {
                for head in 0..dump.n_kv_heads() {
                    let slice = dump.head(layer, head)?;
                    let (pk, pv) = head_permutations(slice, cfg.m, arm.presort(), mix(&[s, layer as u64, head as u64]))?;
                    let fit = HeadSlice {
                        weights: if arm.weighted() { slice.weights } else { None },
                        ..slice
                    };
                    let ckv = compress_head(fit, &run_cfg, &pk, &pv, &[layer as u64, head as u64])?;
                    wmse += quantization_error(slice, &ckv)?.weighted_mse;
                    let f = attention_fidelity(slice, &ckv, queries, s)?;
                    l1 += f.score_l1;
                    cos += f.output_cos;
                }
            }
            let u = units.max(1) as f64;
            out.push(FidelityRow {
                arm,
                seed: i,
                score_l1: l1 / u,
                output_cos: cos / u,
                weighted_mse: wmse / u,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub key_rms: f64,
    pub value_rms: f64,
    pub weight_sum: Option<f64>,
    pub weight_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpSummary {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub n_tokens: usize,
    pub head_dim: usize,
    pub dtype: aqpim_core::kv::DType,
    pub has_weights: bool,
    pub heads: Vec<HeadStats>,
}

fn rms<T: Scalar>(x: &[T]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn inspect<T: Scalar>(dump: &KvDump<T>) -> CliResult<DumpSummary> {
    let mut heads = Vec::new();
    for layer in 0..dump.n_layers() {
        for head in 0..dump.n_kv_heads() {
            let s = dump.head(layer, head)?;
            let w = s.weights.map(|w| w.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
            heads.push(HeadStats {
                layer,
                head,
                key_rms: rms(s.keys.as_slice()),
                value_rms: rms(s.values.as_slice()),
                weight_sum: w.as_ref().map(|w| w.iter().sum()),
                weight_max: w.as_ref().map(|w| w.iter().cloned().fold(0.0, f64::max)),
            });
        }
    }
    Ok(DumpSummary {
        n_layers: dump.n_layers(),
        n_kv_heads: dump.n_kv_heads(),
        n_tokens: dump.n_tokens(),
        head_dim: dump.head_dim(),
        dtype: dump.dtype(),
        has_weights: dump.has_weights(),
        heads,
    })
}
