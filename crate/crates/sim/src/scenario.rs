//! End-to-end scenarios: analytic GPU costs (roofline) combined with simulated
//! PIM attention traces.
//!
//! A report's `cycles_total` is prefill plus `seq_out` decode steps evaluated
//! at the mean context length `seq_in + seq_out / 2`. Its stage breakdowns,
//! counters and `decode_step_cycles` describe one decode step at `seq_in`. PIM
//! kinds overlap the GPU's per-layer work with PIM attention sequence by
//! sequence, so a layer costs `max(G, P) + min(G, P) / batch`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use aqpim_core::quantizer::PqConfig;

use crate::command::Stage;
use crate::config::{PimConfig, Workload};
use crate::engine::simulate;
use crate::error::{Result, SimError};
use crate::layout::{allocate, LayoutInputs, MemoryLayout};
use crate::placement::{plan_placement, Placement};
use crate::report::{Counters, SimReport, StageBreakdown};
use crate::trace::{trace_codebook_generation, trace_decode_attention, trace_dense_decode, GatherSite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// GPU with KV overflow beyond device memory streamed from the host over PCIe.
    GpuCpuOffload,
    /// GPU with unlimited device memory.
    GpuInfinite,
    /// GPU reading the product-quantized cache.
    GpuPq,
    /// Bank-level PIM attention over the uncompressed cache, unlimited capacity.
    AttaccPim,
    Aqpim,
    /// As `Aqpim`, with value gathers done at the buffer die.
    AqpimBufferpeGather,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::GpuCpuOffload,
        ScenarioKind::GpuInfinite,
        ScenarioKind::GpuPq,
        ScenarioKind::AttaccPim,
        ScenarioKind::Aqpim,
        ScenarioKind::AqpimBufferpeGather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::GpuCpuOffload => "gpu_cpu_offload",
            ScenarioKind::GpuInfinite => "gpu_infinite",
            ScenarioKind::GpuPq => "gpu_pq",
            ScenarioKind::AttaccPim => "attacc_pim",
            ScenarioKind::Aqpim => "aqpim",
            ScenarioKind::AqpimBufferpeGather => "aqpim_bufferpe_gather",
        }
    }

    fn is_pim(self) -> bool {
        matches!(self, ScenarioKind::AttaccPim | ScenarioKind::Aqpim | ScenarioKind::AqpimBufferpeGather)
    }

    fn compressed(self) -> bool {
        matches!(self, ScenarioKind::GpuPq | ScenarioKind::Aqpim | ScenarioKind::AqpimBufferpeGather)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub workload: Workload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SeqIn,
    SeqOut,
    Batch,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SeqIn => "seq_in",
            SweepAxis::SeqOut => "seq_out",
            SweepAxis::Batch => "batch",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::SeqIn, SweepAxis::SeqOut, SweepAxis::Batch]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// Cycles and energy accumulated per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Cost {
    cycles: StageBreakdown,
    energy: StageBreakdown,
}

impl Cost {
    /// Roofline time for one GPU kernel.
    fn gpu(&mut self, hw: &PimConfig, stage: Stage, bytes: f64, flops: f64) {
        let g = &hw.gpu_model;
        let secs = (bytes / (g.hbm_bw_GBps * 1e9)).max(flops / (g.flops_T * 1e12));
        self.cycles[stage] += hw.seconds_to_cycles(secs);
        self.energy[stage] += bytes * g.pj_per_byte + flops * g.pj_per_flop;
    }

    fn pcie(&mut self, hw: &PimConfig, bytes: f64) {
        let g = &hw.gpu_model;
        self.cycles[Stage::Pcie] += hw.seconds_to_cycles(bytes / (g.pcie_bw_GBps * 1e9));
        self.energy[Stage::Pcie] += bytes * g.pj_per_byte;
    }

    fn total(&self) -> f64 {
        self.cycles.total()
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            cycles: self.cycles * k,
            energy: self.energy * k,
        }
    }

    fn add(&mut self, o: Cost) {
        self.cycles += o.cycles;
        self.energy += o.energy;
    }
}

/// QKV generation, output projection and FFN of one layer for one decode step.
fn gpu_layer_decode(w: &Workload, hw: &PimConfig) -> Cost {
    let m = &w.model;
    let b = w.batch as f64;
    let mut c = Cost::default();
    for (stage, params) in [
        (Stage::QkvGen, m.qkv_params()),
        (Stage::ProjGpu, m.out_proj_params()),
        (Stage::FfnGpu, m.ffn_params()),
    ] {
        let p = params as f64;
        c.gpu(hw, stage, 2.0 * p, 2.0 * b * p);
    }
    c
}

fn lm_head(w: &Workload, hw: &PimConfig, tokens: f64) -> Cost {
    let p = w.model.lm_head_params() as f64;
    let mut c = Cost::default();
    c.gpu(hw, Stage::ProjGpu, 2.0 * p, 2.0 * tokens * p);
    c
}

/// Raw KV bytes of the whole batch at context `n`, all layers.
fn kv_bytes(w: &Workload, n: usize) -> f64 {
    (w.batch * n) as f64 * w.model.kv_bytes_per_token_layer() as f64 * w.model.n_layers as f64
}

/// KV bytes that do not fit in GPU memory next to the weights.
fn kv_overflow(w: &Workload, hw: &PimConfig, n: usize) -> f64 {
    let room = (hw.gpu_model.memory_GB * 1e9 - w.model.weight_bytes() as f64).max(0.0);
    (kv_bytes(w, n) - room).max(0.0)
}

/// One layer of GPU prefill over `seq_in` tokens per sequence.
pub fn gpu_prefill_layer(w: &Workload, hw: &PimConfig) -> (StageBreakdown, StageBreakdown) {
    let c = prefill_layer_cost(w, hw);
    (c.cycles, c.energy)
}

fn prefill_layer_cost(w: &Workload, hw: &PimConfig) -> Cost {
    let m = &w.model;
    let s = w.seq_in as f64;
    let t = w.batch as f64 * s;
    let mut c = Cost::default();
    if w.seq_in == 0 {
        return c;
    }
    for (stage, params) in [
        (Stage::QkvGen, m.qkv_params()),
        (Stage::ProjGpu, m.out_proj_params()),
        (Stage::FfnGpu, m.ffn_params()),
    ] {
        let p = params as f64;
        c.gpu(hw, stage, 2.0 * p, 2.0 * t * p);
    }
    // Causal attention: QK^T and PV over half the score matrix.
    let kv = t * m.kv_bytes_per_token_layer() as f64;
    let flops = 2.0 * w.batch as f64 * s * s * (m.n_heads * m.head_dim) as f64;
    c.gpu(hw, Stage::Atnk, kv / 2.0, flops / 2.0);
    c.gpu(hw, Stage::Atnv, kv / 2.0, flops / 2.0);
    c
}

/// Analytic GPU prefill cycles of one layer.
pub fn gpu_prefill_layer_cycles(w: &Workload, hw: &PimConfig) -> f64 {
    prefill_layer_cost(w, hw).total()
}

/// Placement and layout of the compressed cache for context `n`.
fn pq_setup(w: &Workload, pq: &PqConfig, hw: &PimConfig, n: usize) -> Result<(Placement, MemoryLayout)> {
    let placement = plan_placement(&w.model, pq, w.batch, hw)?;
    let layout = allocate(
        &LayoutInputs {
            pq: pq.clone(),
            seq_len: n,
            n_layers: w.model.n_layers,
            head_dim: w.model.head_dim,
            subvectors_per_bank: placement.max_subvectors_per_bank(),
            group: w.model.group(),
        },
        hw,
    )?;
    Ok((placement, layout))
}

/// Simulated codebook generation of one layer at `seq_in`.
pub fn cluster_layer_report(w: &Workload, pq: &PqConfig, hw: &PimConfig) -> Result<SimReport> {
    let (placement, layout) = pq_setup(w, pq, hw, w.seq_in)?;
    let trace = trace_codebook_generation(w, pq, &placement, &layout, hw)?;
    simulate(&trace, hw)
}

/// Simulated PIM attention of one layer for one decode step at context `n`.
pub fn pim_attention_layer(kind: ScenarioKind, w: &Workload, pq: &PqConfig, hw: &PimConfig, n: usize) -> Result<SimReport> {
    let at = Workload {
        seq_in: n,
        ..w.clone()
    };
    match kind {
        ScenarioKind::AttaccPim => {
            // Each unit spreads over its whole bank slice.
            let spread = PqConfig {
                m: w.model.head_dim,
                ..pq.clone()
            };
            let placement = plan_placement(&w.model, &spread, w.batch, hw)?;
            simulate(&trace_dense_decode(&at, &placement, hw)?, hw)
        }
        ScenarioKind::Aqpim | ScenarioKind::AqpimBufferpeGather => {
            // Rows are allocated for the longest context the run reaches.
            let (placement, layout) = pq_setup(&at, pq, hw, n.max(w.seq_in + w.seq_out))?;
            let layout = if n == layout.n_quantized + layout.n_full_precision {
                layout
            } else {
                allocate_at(&layout, &at, pq, hw, n)?
            };
            let site = if kind == ScenarioKind::Aqpim {
                GatherSite::Bankpe
            } else {
                GatherSite::Bufferpe
            };
            simulate(&trace_decode_attention(&at, pq, &placement, &layout, hw, site)?, hw)
        }
        _ => Err(SimError::Config(format!("{kind} has no PIM attention"))),
    }
}

/// Layout for context `n` after checking that the run's longest context fits.
fn allocate_at(max: &MemoryLayout, w: &Workload, pq: &PqConfig, hw: &PimConfig, n: usize) -> Result<MemoryLayout> {
    allocate(
        &LayoutInputs {
            pq: pq.clone(),
            seq_len: n,
            n_layers: w.model.n_layers,
            head_dim: w.model.head_dim,
            subvectors_per_bank: max.spb,
            group: max.group,
        },
        hw,
    )
}

struct Step {
    cost: Cost,
    cycles: f64,
    counters: Counters,
    max_channel_busy: f64,
}

fn decode_step(kind: ScenarioKind, w: &Workload, pq: &PqConfig, hw: &PimConfig, n: usize) -> Result<Step> {
    let layers = w.model.n_layers as f64;
    let g = gpu_layer_decode(w, hw);
    let head = lm_head(w, hw, w.batch as f64);
    let mut cost = g.scaled(layers);
    cost.add(head);
    if kind.is_pim() {
        let p = pim_attention_layer(kind, w, pq, hw, n)?;
        cost.add(Cost {
            cycles: p.cycles_by_stage * layers,
            energy: p.energy_by_stage * layers,
        });
        let (gc, pc) = (g.total(), p.cycles_total);
        let per_layer = gc.max(pc) + gc.min(pc) / w.batch as f64;
        return Ok(Step {
            cost,
            cycles: layers * per_layer + head.total(),
            counters: p.counters * w.model.n_layers as u64,
            max_channel_busy: p.max_channel_busy * layers,
        });
    }
    let mut kv = kv_bytes(w, n);
    if kind.compressed() {
        kv /= pq.compression(n, w.model.head_dim).factor;
    }
    if kind == ScenarioKind::GpuCpuOffload {
        let over = kv_overflow(w, hw, n);
        cost.pcie(hw, over);
        kv -= over;
    }
    let flops = 4.0 * (w.batch * n) as f64 * (w.model.n_heads * w.model.head_dim) as f64 * layers;
    cost.gpu(hw, Stage::Atnk, kv / 2.0, flops / 2.0);
    cost.gpu(hw, Stage::Atnv, kv / 2.0, flops / 2.0);
    Ok(Step {
        cycles: cost.total(),
        cost,
        counters: Counters::default(),
        max_channel_busy: 0.0,
    })
}

pub fn run_scenario(sc: &Scenario, pq: &PqConfig, hw: &PimConfig) -> Result<SimReport> {
    let w = &sc.workload;
    w.validate()?;
    hw.validate()?;
    pq.validate()?;
    pq.check_head_dim(w.model.head_dim)?;
    let kind = sc.kind;
    let layers = w.model.n_layers as f64;

    let mut prefill_cycles = 0.0;
    if w.seq_in > 0 {
        let head = lm_head(w, hw, w.batch as f64);
        let mut per_layer = prefill_layer_cost(w, hw).total();
        if kind.compressed() && kind.is_pim() {
            per_layer = per_layer.max(cluster_layer_report(w, pq, hw)?.cycles_total);
        }
        prefill_cycles = layers * per_layer + head.total();
        if kind == ScenarioKind::GpuCpuOffload {
            let mut c = Cost::default();
            c.pcie(hw, kv_overflow(w, hw, w.seq_in));
            prefill_cycles += c.total();
        }
    }

    let step = decode_step(kind, w, pq, hw, w.seq_in)?;
    let mid = w.seq_in + w.seq_out / 2;
    let decode_cycles = if w.seq_out == 0 {
        0.0
    } else if mid == w.seq_in {
        step.cycles * w.seq_out as f64
    } else {
        decode_step(kind, w, pq, hw, mid)?.cycles * w.seq_out as f64
    };

    let compression_factor = if kind.compressed() {
        pq.compression(w.seq_in.max(1), w.model.head_dim).factor
    } else {
        1.0
    };
    Ok(SimReport {
        label: format!("{kind} batch={} seq_in={} seq_out={}", w.batch, w.seq_in, w.seq_out),
        cycles_total: prefill_cycles + decode_cycles,
        cycles_by_stage: step.cost.cycles,
        energy_by_stage: step.cost.energy,
        counters: step.counters,
        max_channel_busy: step.max_channel_busy,
        prefill_cycles,
        decode_step_cycles: step.cycles,
        compression_factor,
    })
}

/// One report per (scenario, point), points varying `axis`.
pub fn sweep(scenarios: &[Scenario], axis: SweepAxis, points: &[usize], pq: &PqConfig, hw: &PimConfig) -> Result<Vec<SimReport>> {
    if points.is_empty() {
        return Err(SimError::Config("sweep needs at least one point".into()));
    }
    let mut out = Vec::with_capacity(scenarios.len() * points.len());
    for sc in scenarios {
        for &v in points {
            let mut s = sc.clone();
            match axis {
                SweepAxis::SeqIn => s.workload.seq_in = v,
                SweepAxis::SeqOut => s.workload.seq_out = v,
                SweepAxis::Batch => s.workload.batch = v,
            }
            out.push(run_scenario(&s, pq, hw)?);
        }
    }
    Ok(out)
}
