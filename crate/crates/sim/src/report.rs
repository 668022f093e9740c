use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul};

use serde::{Deserialize, Serialize};

use crate::command::Stage;

/// One value per stage. Serializes as an object keyed by stage name.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBreakdown {
    pub qkv_gen: f64,
    pub transfer: f64,
    pub atnk: f64,
    pub sfm: f64,
    pub atnv: f64,
    pub retrieval: f64,
    pub cluster_dc: f64,
    pub cluster_ca: f64,
    pub cluster_cc: f64,
    pub ffn_gpu: f64,
    pub proj_gpu: f64,
    pub pcie: f64,
}

impl Index<Stage> for StageBreakdown {
    type Output = f64;
    fn index(&self, s: Stage) -> &f64 {
        match s {
            Stage::QkvGen => &self.qkv_gen,
            Stage::Transfer => &self.transfer,
            Stage::Atnk => &self.atnk,
            Stage::Sfm => &self.sfm,
            Stage::Atnv => &self.atnv,
            Stage::Retrieval => &self.retrieval,
            Stage::ClusterDc => &self.cluster_dc,
            Stage::ClusterCa => &self.cluster_ca,
            Stage::ClusterCc => &self.cluster_cc,
            Stage::FfnGpu => &self.ffn_gpu,
            Stage::ProjGpu => &self.proj_gpu,
            Stage::Pcie => &self.pcie,
        }
    }
}

impl IndexMut<Stage> for StageBreakdown {
    fn index_mut(&mut self, s: Stage) -> &mut f64 {
        match s {
            Stage::QkvGen => &mut self.qkv_gen,
            Stage::Transfer => &mut self.transfer,
            Stage::Atnk => &mut self.atnk,
            Stage::Sfm => &mut self.sfm,
            Stage::Atnv => &mut self.atnv,
            Stage::Retrieval => &mut self.retrieval,
            Stage::ClusterDc => &mut self.cluster_dc,
            Stage::ClusterCa => &mut self.cluster_ca,
            Stage::ClusterCc => &mut self.cluster_cc,
            Stage::FfnGpu => &mut self.ffn_gpu,
            Stage::ProjGpu => &mut self.proj_gpu,
            Stage::Pcie => &mut self.pcie,
        }
    }
}

impl StageBreakdown {
    pub fn total(&self) -> f64 {
        Stage::ALL.iter().map(|&s| self[s]).sum()
    }
}

impl Add for StageBreakdown {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for StageBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        for s in Stage::ALL {
            self[s] += rhs[s];
        }
    }
}

impl Mul<f64> for StageBreakdown {
    type Output = Self;
    fn mul(mut self, k: f64) -> Self {
        for s in Stage::ALL {
            self[s] *= k;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    /// Row activations, counted per bank.
    pub acts: u64,
    pub col_reads: u64,
    pub col_writes: u64,
    pub macs: u64,
    pub tsv_bytes: u64,
    pub inter_hbm_bytes: u64,
    pub bufferpe_ops: u64,
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Self) {
        self.acts += o.acts;
        self.col_reads += o.col_reads;
        self.col_writes += o.col_writes;
        self.macs += o.macs;
        self.tsv_bytes += o.tsv_bytes;
        self.inter_hbm_bytes += o.inter_hbm_bytes;
        self.bufferpe_ops += o.bufferpe_ops;
    }
}

impl Mul<u64> for Counters {
    type Output = Self;
    fn mul(self, k: u64) -> Self {
        Self {
            acts: self.acts * k,
            col_reads: self.col_reads * k,
            col_writes: self.col_writes * k,
            macs: self.macs * k,
            tsv_bytes: self.tsv_bytes * k,
            inter_hbm_bytes: self.inter_hbm_bytes * k,
            bufferpe_ops: self.bufferpe_ops * k,
        }
    }
}

/// Cycles are memory-clock cycles. For a trace simulation a stage's cycles are
/// the time during which at least one of its commands is executing, maximized
/// over channels; stages can overlap, so they need not sum to `cycles_total`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub cycles_total: f64,
    pub cycles_by_stage: StageBreakdown,
    /// Picojoules.
    pub energy_by_stage: StageBreakdown,
    pub counters: Counters,
    /// Largest per-channel busy time (union of all command intervals).
    pub max_channel_busy: f64,
    /// Scenario runs only: prefill part of `cycles_total`.
    #[serde(default)]
    pub prefill_cycles: f64,
    /// Scenario runs only: one decode step at the input context length.
    #[serde(default)]
    pub decode_step_cycles: f64,
    /// Scenario runs only: KV capacity reduction applied (1 for uncompressed).
    #[serde(default)]
    pub compression_factor: f64,
}

impl SimReport {
    pub fn energy_total(&self) -> f64 {
        self.energy_by_stage.total()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn csv_header() -> String {
        let mut h = String::from("label,cycles_total,prefill_cycles,decode_step_cycles,compression_factor");
        for s in Stage::ALL {
            let _ = write!(h, ",{}", s.name());
        }
        for s in Stage::ALL {
            let _ = write!(h, ",energy_{}", s.name());
        }
        h.push_str(",acts,col_reads,col_writes,macs,tsv_bytes,inter_hbm_bytes,bufferpe_ops");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{}",
            self.label, self.cycles_total, self.prefill_cycles, self.decode_step_cycles, self.compression_factor
        );
        for s in Stage::ALL {
            let _ = write!(r, ",{}", self.cycles_by_stage[s]);
        }
        for s in Stage::ALL {
            let _ = write!(r, ",{}", self.energy_by_stage[s]);
        }
        let c = &self.counters;
        let _ = write!(
            r,
            ",{},{},{},{},{},{},{}",
            c.acts, c.col_reads, c.col_writes, c.macs, c.tsv_bytes, c.inter_hbm_bytes, c.bufferpe_ops
        );
        r
    }

    pub fn to_csv(reports: &[SimReport]) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}
