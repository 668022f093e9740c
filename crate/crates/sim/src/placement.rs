//! Data mapping: each (sequence, KV head) unit lives in one stack, on a
//! contiguous slice of that stack's banks, with subvectors dealt round-robin
//! over the slice.

use serde::{Deserialize, Serialize};

use aqpim_core::quantizer::PqConfig;

use crate::config::{ModelShape, PimConfig};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlacement {
    pub batch: usize,
    pub kv_head: usize,
    pub hbm: usize,
    /// Stack-local bank ids (channel-major), one per subvector.
    pub subvector_bank: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub units: Vec<UnitPlacement>,
    pub n_hbms: usize,
    pub banks_per_hbm: usize,
    pub banks_per_channel: usize,
    /// Fraction of BankPEs holding at least one subvector.
    pub utilization: f64,
}

/// Placement of one KV head of one sequence per unit.
pub fn plan_placement(model: &ModelShape, pq: &PqConfig, batch: usize, hw: &PimConfig) -> Result<Placement> {
    model.validate()?;
    hw.validate()?;
    pq.validate()?;
    pq.check_head_dim(model.head_dim)?;
    let n_units = batch * model.n_kv_heads;
    let bph = hw.banks_per_hbm();
    let total = hw.total_banks();
    if n_units > total {
        return Err(SimError::Capacity {
            resource: "banks (one per sequence x KV head)".into(),
            needed: n_units as u64,
            available: total as u64,
        });
    }
    let mut per_hbm = vec![0usize; hw.n_hbms];
    for u in 0..n_units {
        per_hbm[u % hw.n_hbms] += 1;
    }
    let mut next_slot = vec![0usize; hw.n_hbms];
    let mut units = Vec::with_capacity(n_units);
    let mut used = 0usize;
    for u in 0..n_units {
        let hbm = u % hw.n_hbms;
        let slice = bph / per_hbm[hbm];
        let start = next_slot[hbm] * slice;
        next_slot[hbm] += 1;
        let width = slice.min(pq.m);
        used += width;
        units.push(UnitPlacement {
            batch: u / model.n_kv_heads,
            kv_head: u % model.n_kv_heads,
            hbm,
            subvector_bank: (0..pq.m).map(|s| start + s % width).collect(),
        });
    }
    Ok(Placement {
        units,
        n_hbms: hw.n_hbms,
        banks_per_hbm: bph,
        banks_per_channel: hw.banks_per_channel,
        utilization: used as f64 / total as f64,
    })
}

impl Placement {
    /// Subvectors held by every bank, indexed `[hbm][local bank]`.
    pub fn subvectors_per_bank(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; self.banks_per_hbm]; self.n_hbms];
        for u in &self.units {
            for &b in &u.subvector_bank {
                counts[u.hbm][b] += 1;
            }
        }
        counts
    }

    pub fn max_subvectors_per_bank(&self) -> usize {
        self.subvectors_per_bank()
            .iter()
            .flat_map(|h| h.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Units touching `channel` of `hbm`.
    pub fn units_on_channel(&self, hbm: usize, channel: usize) -> Vec<usize> {
        let lo = channel * self.banks_per_channel;
        let hi = lo + self.banks_per_channel;
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.hbm == hbm && u.subvector_bank.iter().any(|&b| (lo..hi).contains(&b)))
            .map(|(i, _)| i)
            .collect()
    }
}
