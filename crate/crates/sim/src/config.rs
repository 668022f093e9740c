//! Hardware, GPU and model-shape parameters. All JSON documents reject unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// DRAM timings in memory-clock cycles, except `tCK_ns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timings {
    #[serde(rename = "tCK_ns")]
    pub t_ck_ns: f64,
    #[serde(rename = "tRCD")]
    pub t_rcd: u64,
    #[serde(rename = "tRP")]
    pub t_rp: u64,
    #[serde(rename = "tRAS")]
    pub t_ras: u64,
    /// Column command to column command within one bank group.
    #[serde(rename = "tCCDL")]
    pub t_ccdl: u64,
    /// ACT to ACT within one channel.
    #[serde(rename = "tRRD")]
    pub t_rrd: u64,
    /// Column read to data.
    #[serde(rename = "tCL")]
    pub t_cl: u64,
}

impl Default for Timings {
    fn default() -> Self {
        Self {
            t_ck_ns: 0.625,
            t_rcd: 24,
            t_rp: 24,
            t_ras: 53,
            t_ccdl: 2,
            t_rrd: 4,
            t_cl: 24,
        }
    }
}

/// Per-operation energies in picojoules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Energies {
    /// One row activation in one bank.
    pub e_act: f64,
    /// One column read (including a RET lookup) in one bank.
    pub e_rd_col: f64,
    pub e_wr_col: f64,
    /// One FP16 multiply-accumulate.
    pub e_mac16: f64,
    pub e_tsv_per_bit: f64,
    pub e_bufferpe_op: f64,
}

impl Default for Energies {
    fn default() -> Self {
        Self {
            e_act: 530.0,
            e_rd_col: 120.0,
            e_wr_col: 130.0,
            e_mac16: 0.5,
            e_tsv_per_bit: 0.6,
            e_bufferpe_op: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct GpuModel {
    pub hbm_bw_GBps: f64,
    pub pcie_bw_GBps: f64,
    /// Effective (achieved) FP16 throughput in TFLOP/s.
    pub flops_T: f64,
    /// Device memory holding weights and, for GPU-only systems, the KV cache.
    pub memory_GB: f64,
    pub pj_per_byte: f64,
    pub pj_per_flop: f64,
}

impl Default for GpuModel {
    fn default() -> Self {
        Self {
            hbm_bw_GBps: 3350.0,
            pcie_bw_GBps: 256.0,
            flops_T: 400.0,
            memory_GB: 80.0,
            pj_per_byte: 31.0,
            pj_per_flop: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PimConfig {
    pub n_hbms: usize,
    pub channels_per_hbm: usize,
    pub banks_per_channel: usize,
    pub banks_per_group: usize,
    pub row_buffer_bytes: usize,
    pub rows_per_bank: usize,
    /// Bytes delivered by one column access.
    pub column_bytes: usize,
    /// FP16 MAC lanes per BankPE.
    pub bankpe_lanes: usize,
    /// BufferPE operations per cycle, shared by all channels of one stack.
    pub bufferpe_throughput: u64,
    /// Bank-to-buffer-die bandwidth per channel.
    pub tsv_bytes_per_cycle: u64,
    pub timings: Timings,
    pub energies: Energies,
    pub gpu_model: GpuModel,
}

impl Default for PimConfig {
    fn default() -> Self {
        Self {
            n_hbms: 4,
            channels_per_hbm: 16,
            banks_per_channel: 16,
            banks_per_group: 4,
            row_buffer_bytes: 1024,
            rows_per_bank: 65536,
            column_bytes: 32,
            bankpe_lanes: 16,
            bufferpe_throughput: 256,
            tsv_bytes_per_cycle: 32,
            timings: Timings::default(),
            energies: Energies::default(),
            gpu_model: GpuModel::default(),
        }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_hbms", self.n_hbms),
            ("channels_per_hbm", self.channels_per_hbm),
            ("banks_per_channel", self.banks_per_channel),
            ("banks_per_group", self.banks_per_group),
            ("row_buffer_bytes", self.row_buffer_bytes),
            ("rows_per_bank", self.rows_per_bank),
            ("column_bytes", self.column_bytes),
            ("bankpe_lanes", self.bankpe_lanes),
            ("bufferpe_throughput", self.bufferpe_throughput as usize),
            ("tsv_bytes_per_cycle", self.tsv_bytes_per_cycle as usize),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        if self.banks_per_channel > 64 {
            return Err(SimError::Config("at most 64 banks per channel".into()));
        }
        if !self.banks_per_channel.is_multiple_of(self.banks_per_group) {
            return Err(SimError::Config(format!(
                "banks_per_group {} does not divide banks_per_channel {}",
                self.banks_per_group, self.banks_per_channel
            )));
        }
        if !self.row_buffer_bytes.is_multiple_of(self.column_bytes) {
            return Err(SimError::Config(format!(
                "column_bytes {} does not divide row_buffer_bytes {}",
                self.column_bytes, self.row_buffer_bytes
            )));
        }
        let t = &self.timings;
        let e = &self.energies;
        let g = &self.gpu_model;
        let positive = [
            ("tCK_ns", t.t_ck_ns),
            ("tRCD", t.t_rcd as f64),
            ("tRP", t.t_rp as f64),
            ("tRAS", t.t_ras as f64),
            ("tCCDL", t.t_ccdl as f64),
            ("tRRD", t.t_rrd as f64),
            ("tCL", t.t_cl as f64),
            ("e_act", e.e_act),
            ("e_rd_col", e.e_rd_col),
            ("e_wr_col", e.e_wr_col),
            ("e_mac16", e.e_mac16),
            ("e_tsv_per_bit", e.e_tsv_per_bit),
            ("e_bufferpe_op", e.e_bufferpe_op),
            ("hbm_bw_GBps", g.hbm_bw_GBps),
            ("pcie_bw_GBps", g.pcie_bw_GBps),
            ("flops_T", g.flops_T),
            ("memory_GB", g.memory_GB),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(g.pj_per_byte >= 0.0 && g.pj_per_flop >= 0.0) {
            return Err(SimError::Config("GPU energies must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| aqpim_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn banks_per_hbm(&self) -> usize {
        self.channels_per_hbm * self.banks_per_channel
    }
    pub fn total_banks(&self) -> usize {
        self.n_hbms * self.banks_per_hbm()
    }
    pub fn total_channels(&self) -> usize {
        self.n_hbms * self.channels_per_hbm
    }
    pub fn bank_group(&self, bank: usize) -> usize {
        bank / self.banks_per_group
    }
    pub fn columns_per_row(&self) -> usize {
        self.row_buffer_bytes / self.column_bytes
    }
    pub fn pim_capacity_bytes(&self) -> u64 {
        (self.total_banks() * self.rows_per_bank * self.row_buffer_bytes) as u64
    }
    /// Memory-clock cycles per second.
    pub fn clock_hz(&self) -> f64 {
        1e9 / self.timings.t_ck_ns
    }
    pub fn seconds_to_cycles(&self, s: f64) -> f64 {
        s * self.clock_hz()
    }
    pub fn cycles_to_seconds(&self, c: f64) -> f64 {
        c / self.clock_hz()
    }
}

/// Transformer dimensions relevant to decode cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    /// Gated FFN (three projections) rather than two.
    #[serde(default = "yes")]
    pub gated_ffn: bool,
}

fn yes() -> bool {
    true
}

impl ModelShape {
    /// A 7B grouped-query model: 32 layers, 32 query heads sharing 8 KV heads.
    pub fn mistral_7b() -> Self {
        Self {
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            hidden: 4096,
            ffn_dim: 14336,
            vocab: 32000,
            gated_ffn: true,
        }
    }

    /// A 7B multi-head model with one KV head per query head.
    pub fn mha_7b() -> Self {
        Self {
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 32,
            head_dim: 128,
            hidden: 4096,
            ffn_dim: 11008,
            vocab: 32000,
            gated_ffn: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("hidden", self.hidden),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(SimError::Config(format!(
                "{} query heads cannot be grouped over {} KV heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn qkv_params(&self) -> u64 {
        (self.hidden * (self.n_heads + 2 * self.n_kv_heads) * self.head_dim) as u64
    }
    pub fn out_proj_params(&self) -> u64 {
        (self.n_heads * self.head_dim * self.hidden) as u64
    }
    pub fn ffn_params(&self) -> u64 {
        let mats = if self.gated_ffn { 3 } else { 2 };
        (mats * self.hidden * self.ffn_dim) as u64
    }
    pub fn layer_params(&self) -> u64 {
        self.qkv_params() + self.out_proj_params() + self.ffn_params()
    }
    pub fn lm_head_params(&self) -> u64 {
        (self.vocab * self.hidden) as u64
    }
    /// Weights read per decode step, 16-bit.
    pub fn weight_bytes(&self) -> u64 {
        2 * (self.n_layers as u64 * self.layer_params() + 2 * self.lm_head_params())
    }
    /// Raw 16-bit K and V bytes per token per layer.
    pub fn kv_bytes_per_token_layer(&self) -> u64 {
        (2 * self.n_kv_heads * self.head_dim * 2) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub model: ModelShape,
    pub batch: usize,
    pub seq_in: usize,
    pub seq_out: usize,
}

impl Workload {
    pub fn new(model: ModelShape, batch: usize, seq_in: usize, seq_out: usize) -> Self {
        Self {
            model,
            batch,
            seq_in,
            seq_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(SimError::Config("batch must be positive".into()));
        }
        Ok(())
    }
}
