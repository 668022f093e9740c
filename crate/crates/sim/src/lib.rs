//! HBM-PIM simulator for attention over a product-quantized KV cache: memory
//! layout, command traces, a cycle-level replay engine and end-to-end scenarios
//! against GPU baselines.

pub mod address;
pub mod command;
pub mod config;
pub mod engine;
pub mod error;
pub mod layout;
pub mod placement;
pub mod report;
pub mod scenario;
pub mod trace;

pub use address::{AddressMap, Field, PhysAddr};
pub use command::{CommandTrace, Meta, Opcode, Phase, PimCommand, Stage};
pub use config::{Energies, GpuModel, ModelShape, PimConfig, Timings, Workload};
pub use engine::{simulate, simulate_detailed, SimDetail};
pub use error::{Result, SimError};
pub use layout::{allocate, LayoutInputs, MemoryLayout, Region, Stream};
pub use placement::{plan_placement, Placement, UnitPlacement};
pub use report::{Counters, SimReport, StageBreakdown};
pub use scenario::{
    cluster_layer_report, gpu_prefill_layer, gpu_prefill_layer_cycles, pim_attention_layer, run_scenario, sweep, Scenario,
    ScenarioKind, SweepAxis,
};
pub use trace::{trace_codebook_generation, trace_decode_attention, trace_dense_decode, GatherSite};
