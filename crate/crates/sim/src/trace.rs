//! Command-trace generation for one layer: prefill codebook generation, one
//! decode step of compressed attention, and one decode step of uncompressed
//! bank-level attention (the baseline PIM design).
//!
//! Every bank of a channel executes the same program in lockstep. Bank `b`
//! holds an ordered list of (unit, subvector) slots; slot `j` of the program
//! runs on the banks that have at least `j + 1` slots.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use aqpim_core::quantizer::PqConfig;

use crate::command::{CommandTrace, Meta, Opcode, Phase, PimCommand, Stage, TAG_KEY_LOOKUP, TAG_VALUE_LOOKUP};
use crate::config::{PimConfig, Workload};
use crate::error::{Result, SimError};
use crate::layout::{MemoryLayout, Stream};
use crate::placement::Placement;

/// Where the value-side gather by centroid index happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatherSite {
    /// RET inside the bank's open row.
    #[default]
    Bankpe,
    /// Rows and indices shipped to the buffer die, gathered there, sent back.
    Bufferpe,
}

/// Softmax BufferPE operations per score: max, subtract, exp, sum, divide.
pub const SOFTMAX_OPS_PER_SCORE: u64 = 5;
/// Tokens per RET burst before its results are forwarded to the buffer die.
pub const RET_CHUNK: usize = 256;

struct Program<'a> {
    q: Vec<PimCommand>,
    hw: &'a PimConfig,
}

impl<'a> Program<'a> {
    fn new(hw: &'a PimConfig) -> Self {
        Self { q: Vec::new(), hw }
    }

    fn push(&mut self, cmd: PimCommand) -> u32 {
        self.q.push(cmd);
        (self.q.len() - 1) as u32
    }

    fn act(&mut self, mask: u64, row: u64, stage: Stage, flags: u8, window: usize, sub: usize) -> u32 {
        let mut c = PimCommand::new(Opcode::ActAb, mask, stage);
        c.row = row;
        c.meta = Meta {
            window: window as u32,
            subvector: sub as u32,
            flags,
        };
        self.push(c)
    }

    fn pre(&mut self, mask: u64, stage: Stage) -> u32 {
        self.push(PimCommand::new(Opcode::Pre, mask, stage))
    }

    /// A row-touching command with `repeat` column operations.
    fn col(&mut self, op: Opcode, mask: u64, row: u64, repeat: u64, stage: Stage) -> PimCommand {
        let mut c = PimCommand::new(op, mask, stage);
        c.row = row;
        c.repeat = repeat.max(1) as u32;
        c.dram = true;
        c
    }

    /// A register-file transfer (no DRAM columns involved).
    fn xfer(&mut self, op: Opcode, mask: u64, bytes: u64, stage: Stage, dep: Option<u32>) -> u32 {
        let mut c = PimCommand::new(op, mask, stage);
        c.bytes = bytes;
        c.dep = dep;
        self.push(c)
    }

    fn sfm(&mut self, ops: u64, stage: Stage, dep: Option<u32>) -> u32 {
        let mut c = PimCommand::new(Opcode::Sfm, 0, stage);
        c.ops = ops.max(1);
        c.dep = dep;
        self.push(c)
    }

    fn cols_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.hw.column_bytes as u64).max(1)
    }

    /// ACT, one row-touching command per row, PRE, over `rows`, with the bytes of
    /// each row given by `bytes_in(row_offset)`. Returns the last inner command.
    #[allow(clippy::too_many_arguments)]
    fn over_rows(
        &mut self,
        mask: u64,
        rows: Range<u64>,
        stage: Stage,
        mut inner: impl FnMut(&mut Self, u64, usize) -> PimCommand,
    ) -> Option<u32> {
        let mut last = None;
        for (i, r) in rows.enumerate() {
            self.act(mask, r, stage, 0, 0, 0);
            let c = inner(self, r, i);
            last = Some(self.push(c));
            self.pre(mask, stage);
        }
        last
    }
}

fn mask_of(banks: impl IntoIterator<Item = usize>) -> u64 {
    banks.into_iter().fold(0u64, |m, b| m | 1 << b)
}

/// Per channel, per local bank: the (unit, subvector) slots held there.
fn bank_slots(placement: &Placement, hw: &PimConfig) -> Vec<Vec<Vec<(usize, usize)>>> {
    let mut slots = vec![vec![Vec::new(); hw.banks_per_channel]; hw.total_channels()];
    for (ui, u) in placement.units.iter().enumerate() {
        for (s, &b) in u.subvector_bank.iter().enumerate() {
            let ch = u.hbm * hw.channels_per_hbm + b / hw.banks_per_channel;
            slots[ch][b % hw.banks_per_channel].push((ui, s));
        }
    }
    slots
}

fn slot_masks(slots: &[Vec<(usize, usize)>]) -> Vec<u64> {
    let depth = slots.iter().map(Vec::len).max().unwrap_or(0);
    (0..depth)
        .map(|j| mask_of(slots.iter().enumerate().filter(|(_, s)| s.len() > j).map(|(b, _)| b)))
        .collect()
}

/// Units whose first bank lies on this channel; their softmax is issued here.
fn home_units(placement: &Placement, hw: &PimConfig, channel: usize) -> Vec<usize> {
    placement
        .units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.hbm * hw.channels_per_hbm + u.subvector_bank[0] / hw.banks_per_channel == channel)
        .map(|(i, _)| i)
        .collect()
}

fn check_inputs(workload: &Workload, pq: &PqConfig, placement: &Placement, layout: &MemoryLayout, hw: &PimConfig) -> Result<()> {
    workload.validate()?;
    hw.validate()?;
    pq.validate()?;
    pq.check_page_residency(hw.row_buffer_bytes)?;
    let n_units = workload.batch * workload.model.n_kv_heads;
    if placement.units.len() != n_units || placement.n_hbms != hw.n_hbms || placement.banks_per_hbm != hw.banks_per_hbm() {
        return Err(SimError::Config("placement does not match the workload and hardware".into()));
    }
    if layout.spb < placement.max_subvectors_per_bank() || layout.group != workload.model.group() {
        return Err(SimError::Config("layout was allocated for a different placement".into()));
    }
    if layout.row_bytes != hw.row_buffer_bytes as u64 {
        return Err(SimError::Config("layout row size differs from the hardware row buffer".into()));
    }
    Ok(())
}

fn inter_hbm_bytes(placement: &Placement) -> u64 {
    // Units are placed within one stack, so no partial results cross stacks.
    placement
        .units
        .iter()
        .filter(|u| u.subvector_bank.iter().any(|&b| b >= placement.banks_per_hbm))
        .count() as u64
}

fn describe(workload: &Workload, pq: &PqConfig, what: &str) -> String {
    format!(
        "{what} batch={} seq={} heads={}/{} d={} m={} k={}",
        workload.batch,
        workload.seq_in,
        workload.model.n_heads,
        workload.model.n_kv_heads,
        workload.model.head_dim,
        pq.m,
        pq.k
    )
}

/// Entries of a `k`-row table split across rows holding `per_row` entries each.
fn entries_per_row(k: usize, per_row: usize) -> Vec<usize> {
    (0..k.div_ceil(per_row)).map(|r| per_row.min(k - r * per_row)).collect()
}

/// Splits `n` tokens over rows in proportion to the entries each row holds.
fn split_tokens(n: usize, entries: &[usize], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(entries.len());
    let mut acc = 0;
    let mut given = 0;
    for &e in entries {
        acc += e;
        let upto = n * acc / k;
        out.push(upto - given);
        given = upto;
    }
    out
}

/// Prefill clustering of one layer: raw KV written, then `pq.iters` rounds of
/// distance calculation (BankPE MACs against centroids held in registers),
/// cluster assignment (one MIN reduction per token at the BufferPE) and
/// centroid calculation (weighted sums at the BankPE, reciprocals at the
/// BufferPE, one multiply per centroid entry at the BankPE).
pub fn trace_codebook_generation(
    workload: &Workload,
    pq: &PqConfig,
    placement: &Placement,
    layout: &MemoryLayout,
    hw: &PimConfig,
) -> Result<CommandTrace> {
    check_inputs(workload, pq, placement, layout, hw)?;
    let slots = bank_slots(placement, hw);
    let row = hw.row_buffer_bytes as u64;
    let lanes = hw.bankpe_lanes as u64;
    let sub_dim = layout.sub_dim as u64;
    let k_eff = pq.k.min(layout.window_tokens.first().copied().unwrap_or(0)) as u64;
    let mut trace = CommandTrace::new(
        Phase::PrefillCluster,
        hw.total_channels(),
        hw.channels_per_hbm,
        describe(workload, pq, "cluster"),
    );
    trace.inter_hbm_bytes = inter_hbm_bytes(placement);

    for (ch, bank_slots) in slots.iter().enumerate() {
        let masks = slot_masks(bank_slots);
        if masks.is_empty() {
            continue;
        }
        let mut p = Program::new(hw);
        p.push(PimCommand::new(Opcode::SetConfig, masks[0], Stage::Transfer));
        for (j, &mask) in masks.iter().enumerate() {
            for stream in [Stream::Key, Stream::Value] {
                // Raw subvectors of the quantized range, then the full-precision rows.
                let staged = layout.n_quantized as u64 * sub_dim * 2;
                let mut left = staged;
                p.over_rows(mask, layout.staging_rows(stream, j), Stage::Transfer, |p, r, _| {
                    let b = left.min(row);
                    left -= b;
                    let mut c = p.col(Opcode::Wr, mask, r, p.cols_for(b), Stage::Transfer);
                    c.bytes = b;
                    c
                });
                let fp_bytes = layout.n_full_precision as u64 * sub_dim * 2;
                let mut left = fp_bytes;
                p.over_rows(mask, layout.fp_rows(0, stream, j), Stage::Transfer, |p, r, _| {
                    let b = left.min(row);
                    left -= b;
                    let mut c = p.col(Opcode::Wr, mask, r, p.cols_for(b), Stage::Transfer);
                    c.bytes = b;
                    c
                });
                if pq.iters == 0 || k_eff == 0 {
                    continue;
                }
                let mut token0 = 0usize;
                for (w, &n_w) in layout.window_tokens.iter().enumerate() {
                    let tokens = token0..token0 + n_w;
                    token0 += n_w;
                    let spans = row_spans(
                        layout.buffer_region.start,
                        slot_block(layout, stream, j, layout.n_quantized, sub_dim * 2),
                        sub_dim * 2,
                        tokens.clone(),
                        row,
                    );
                    for it in 0..pq.iters {
                        let meta = Meta {
                            window: w as u32,
                            subvector: j as u32,
                            flags: 0,
                        };
                        let mut last_ca = None;
                        for &(r, pts, _) in &spans {
                            p.act(mask, r, Stage::ClusterDc, 0, w, j);
                            let mut dc = p.col(Opcode::MacAb, mask, r, (pts * k_eff * sub_dim).div_ceil(lanes), Stage::ClusterDc);
                            dc.ops = pts * k_eff * sub_dim;
                            dc.meta = meta;
                            let dc = p.push(dc);
                            let mv = p.xfer(Opcode::MvBa, mask, pts * k_eff * 2, Stage::ClusterDc, Some(dc));
                            let ca = p.sfm(pts * bank_count(mask), Stage::ClusterCa, Some(mv));
                            last_ca = Some(p.xfer(Opcode::MvBf, mask, pts * 2, Stage::ClusterCa, Some(ca)));
                            // Weighted accumulation of each point into its centroid's sum.
                            let mut cc = p.col(Opcode::MacAb, mask, r, (pts * sub_dim).div_ceil(lanes), Stage::ClusterCc);
                            cc.ops = pts * sub_dim;
                            cc.dep = last_ca;
                            cc.meta = meta;
                            p.push(cc);
                            p.pre(mask, Stage::ClusterDc);
                        }
                        // Denominators: weight sums and reciprocals at the BufferPE.
                        let rec = p.sfm((n_w as u64 + k_eff) * bank_count(mask), Stage::ClusterCc, last_ca);
                        let back = p.xfer(Opcode::MvBf, mask, k_eff * 2, Stage::ClusterCc, Some(rec));
                        // New centroids (sums times reciprocals) written back from registers.
                        let cb0 = layout.centroid_row(0, stream, j, w);
                        let per_row = (row / (sub_dim * 2)) as usize;
                        for (ri, e) in entries_per_row(k_eff as usize, per_row).into_iter().enumerate() {
                            let r = cb0 + ri as u64;
                            p.act(mask, r, Stage::ClusterCc, 0, w, j);
                            let mut wr = p.col(Opcode::Wr, mask, r, p.cols_for(e as u64 * sub_dim * 2), Stage::ClusterCc);
                            wr.dep = Some(back);
                            wr.meta = meta;
                            p.push(wr);
                            p.pre(mask, Stage::ClusterCc);
                        }
                        if it + 1 == pq.iters {
                            // Final assignments become the stored indices.
                            let idx_bytes = n_w as u64 * 2;
                            let mut left = idx_bytes;
                            p.over_rows(mask, layout.index_rows(0, stream, j, tokens.clone()), Stage::ClusterCa, |p, r, _| {
                                let b = left.min(row);
                                left -= b;
                                let mut c = p.col(Opcode::Wr, mask, r, p.cols_for(b), Stage::ClusterCa);
                                c.dep = last_ca;
                                c
                            });
                        }
                    }
                }
            }
        }
        trace.queues[ch] = p.q;
    }
    Ok(trace)
}

fn bank_count(mask: u64) -> u64 {
    mask.count_ones() as u64
}


/// Byte offset of a slot's block when every slot of both streams holds `n`
/// items of `unit` bytes back to back.
fn slot_block(layout: &MemoryLayout, stream: Stream, slot: usize, n: usize, unit: u64) -> u64 {
    (stream as u64 * layout.spb as u64 + slot as u64) * n as u64 * unit
}

/// (row, items starting in it, bytes in it) for items `items` of `unit` bytes
/// stored from byte `block` of a region starting at row `base`. An item
/// straddling two rows counts toward the row holding its start.
fn row_spans(base: u64, block: u64, unit: u64, items: Range<usize>, row: u64) -> Vec<(u64, u64, u64)> {
    let lo = block + items.start as u64 * unit;
    let hi = block + items.end as u64 * unit;
    let mut out = Vec::new();
    let mut r = lo / row;
    while r * row < hi {
        let a = lo.max(r * row);
        let z = hi.min((r + 1) * row);
        let n = (z - block).div_ceil(unit) - (a - block).div_ceil(unit);
        out.push((base + r, n, z - a));
        r += 1;
    }
    out
}

fn fp_spans(layout: &MemoryLayout, stream: Stream, slot: usize) -> Vec<(u64, u64, u64)> {
    let unit = layout.sub_dim as u64 * 2;
    let base = layout.layer_index_base(0) + layout.index_rows_per_layer;
    let n = layout.n_full_precision;
    row_spans(base, slot_block(layout, stream, slot, n, unit), unit, 0..n, layout.row_bytes)
}

fn index_spans(layout: &MemoryLayout, stream: Stream, slot: usize, tokens: Range<usize>) -> Vec<(u64, u64, u64)> {
    let base = layout.layer_index_base(0);
    let block = slot_block(layout, stream, slot, layout.n_quantized, 2);
    row_spans(base, block, 2, tokens, layout.row_bytes)
}

/// One decode step of one layer over the compressed cache.
///
/// Per bank slot: the query subvectors arrive; each window's key lookup table
/// is computed from its centroids and written to a table row; the stored key
/// indices are read into the register file and resolved against the open
/// table row by RET, results summed across subvectors at the BufferPE; the
/// full-precision sink and recent keys take plain MACs. After the softmax at
/// the BufferPE the probabilities return to the banks, and the value side
/// resolves each token's centroid either inside the bank or at the buffer die.
pub fn trace_decode_attention(
    workload: &Workload,
    pq: &PqConfig,
    placement: &Placement,
    layout: &MemoryLayout,
    hw: &PimConfig,
    gather: GatherSite,
) -> Result<CommandTrace> {
    check_inputs(workload, pq, placement, layout, hw)?;
    let slots = bank_slots(placement, hw);
    let row = hw.row_buffer_bytes as u64;
    let sub_dim = layout.sub_dim as u64;
    let g = layout.group as u64;
    let seq = (layout.n_quantized + layout.n_full_precision) as u64;
    let k_eff = pq.k.min(layout.window_tokens.first().copied().unwrap_or(0));
    let per_row = (row / (sub_dim * 2)).max(1) as usize;
    let cb_entries = entries_per_row(k_eff, per_row);
    // One RET access returns a column's worth of looked-up entries.
    let key_per_col = (hw.column_bytes as u64 / 2).max(1);
    let value_per_col = (hw.column_bytes as u64 / (sub_dim * 2)).max(1);
    let mut trace = CommandTrace::new(
        Phase::DecodeStep,
        hw.total_channels(),
        hw.channels_per_hbm,
        describe(workload, pq, &format!("decode-{gather:?}").to_lowercase()),
    );
    trace.inter_hbm_bytes = inter_hbm_bytes(placement);

    for (ch, bank_slots) in slots.iter().enumerate() {
        let masks = slot_masks(bank_slots);
        if masks.is_empty() {
            continue;
        }
        let mut p = Program::new(hw);
        p.push(PimCommand::new(Opcode::SetConfig, masks[0], Stage::Transfer));

        for (j, &mask) in masks.iter().enumerate() {
            let nb = bank_count(mask);
            p.xfer(Opcode::Wr, mask, g * sub_dim * 2, Stage::Transfer, None);
            // Append the new token to the recent ring; the evicted one is encoded
            // against the newest window's centroids.
            for stream in [Stream::Key, Stream::Value] {
                if let Some(&(r, _, _)) = fp_spans(layout, stream, j).last() {
                    p.act(mask, r, Stage::Transfer, 0, 0, j);
                    let mut wr = p.col(Opcode::Wr, mask, r, p.cols_for(sub_dim * 2), Stage::Transfer);
                    wr.bytes = sub_dim * 2;
                    p.push(wr);
                    p.pre(mask, Stage::Transfer);
                }
                if layout.n_windows > 0 {
                    let cb0 = layout.centroid_row(0, stream, j, layout.n_windows - 1);
                    for (ri, &e) in cb_entries.iter().enumerate() {
                        let r = cb0 + ri as u64;
                        p.act(mask, r, Stage::Transfer, 0, layout.n_windows - 1, j);
                        let mut enc = p.col(Opcode::MacAb, mask, r, p.cols_for(e as u64 * sub_dim * 2), Stage::Transfer);
                        enc.ops = e as u64 * sub_dim;
                        p.push(enc);
                        p.pre(mask, Stage::Transfer);
                    }
                }
            }

            // Key lookup tables, one per window and query head.
            for w in 0..layout.n_windows {
                let cb0 = layout.centroid_row(0, Stream::Key, j, w);
                let mut last = None;
                for (ri, &e) in cb_entries.iter().enumerate() {
                    let r = cb0 + ri as u64;
                    p.act(mask, r, Stage::Atnk, 0, w, j);
                    let mut mac = p.col(Opcode::MacAb, mask, r, p.cols_for(e as u64 * sub_dim * 2), Stage::Atnk);
                    mac.ops = e as u64 * sub_dim * g;
                    mac.meta = Meta { window: w as u32, subvector: j as u32, flags: 0 };
                    last = Some(p.push(mac));
                    p.pre(mask, Stage::Atnk);
                }
                for qh in 0..layout.group {
                    let r = layout.table_row(w, j, qh);
                    p.act(mask, r, Stage::Atnk, 0, w, j);
                    let mut wr = p.col(Opcode::Wr, mask, r, p.cols_for(k_eff as u64 * 2), Stage::Atnk);
                    wr.dep = last;
                    p.push(wr);
                    p.pre(mask, Stage::Atnk);
                }
            }

            // Key scores of quantized tokens.
            let mut token0 = 0usize;
            for (w, &n_w) in layout.window_tokens.iter().enumerate() {
                let tokens = token0..token0 + n_w;
                token0 += n_w;
                let meta = Meta { window: w as u32, subvector: j as u32, flags: TAG_KEY_LOOKUP };
                fetch_indices(&mut p, mask, layout, Stream::Key, j, tokens.clone(), Stage::Retrieval);
                match gather {
                    GatherSite::Bankpe => {
                        for qh in 0..layout.group {
                            let r = layout.table_row(w, j, qh);
                            p.act(mask, r, Stage::Retrieval, TAG_KEY_LOOKUP, w, j);
                            pipelined(
                                &mut p,
                                chunks(n_w, RET_CHUNK),
                                |p, c| {
                                    let mut ret = p.col(Opcode::Ret, mask, r, c.div_ceil(key_per_col), Stage::Retrieval);
                                    ret.meta = meta;
                                    p.push(ret)
                                },
                                |p, ret, c| {
                                    let mv = p.xfer(Opcode::MvBa, mask, c * 2, Stage::Retrieval, Some(ret));
                                    p.sfm(c * nb, Stage::Retrieval, Some(mv));
                                },
                            );
                            p.pre(mask, Stage::Retrieval);
                        }
                    }
                    GatherSite::Bufferpe => {
                        let mut last = None;
                        for qh in 0..layout.group {
                            let r = layout.table_row(w, j, qh);
                            p.act(mask, r, Stage::Retrieval, TAG_KEY_LOOKUP, w, j);
                            let mut mv = p.col(Opcode::MvBa, mask, r, p.cols_for(k_eff as u64 * 2), Stage::Retrieval);
                            mv.bytes = k_eff as u64 * 2;
                            mv.meta = meta;
                            last = Some(p.push(mv));
                            p.pre(mask, Stage::Retrieval);
                        }
                        pipelined(
                            &mut p,
                            chunks(n_w, RET_CHUNK),
                            |p, c| p.xfer(Opcode::MvBa, mask, c * 2, Stage::Retrieval, last),
                            |p, mv, c| {
                                p.sfm(2 * c * g * nb, Stage::Retrieval, Some(mv));
                            },
                        );
                    }
                }
            }
            // Key scores of full-precision tokens.
            let mut last = None;
            for (r, n, bytes) in fp_spans(layout, Stream::Key, j) {
                p.act(mask, r, Stage::Retrieval, 0, 0, j);
                let mut mac = p.col(Opcode::MacAb, mask, r, p.cols_for(bytes), Stage::Retrieval);
                mac.ops = n * sub_dim * g;
                last = Some(p.push(mac));
                p.pre(mask, Stage::Retrieval);
            }
            if layout.n_full_precision > 0 {
                p.xfer(Opcode::MvBa, mask, layout.n_full_precision as u64 * g * 2, Stage::Retrieval, last);
            }
        }

        // Softmax for units homed here, then probabilities back to each unit's banks.
        let homes = home_units(placement, hw, ch);
        let before = p.q.len().checked_sub(1).map(|i| i as u32);
        let sfm = if homes.is_empty() {
            before
        } else {
            Some(p.sfm(SOFTMAX_OPS_PER_SCORE * seq * g * homes.len() as u64, Stage::Sfm, before))
        };
        for unit_mask in unit_masks(bank_slots) {
            let mut mv = PimCommand::new(Opcode::MvBf, unit_mask, Stage::Sfm);
            mv.bytes = seq * g * 2;
            mv.broadcast = true;
            mv.dep = sfm;
            p.push(mv);
        }

        for (j, &mask) in masks.iter().enumerate() {
            let nb = bank_count(mask);
            let mut token0 = 0usize;
            for (w, &n_w) in layout.window_tokens.iter().enumerate() {
                let tokens = token0..token0 + n_w;
                token0 += n_w;
                let meta = Meta { window: w as u32, subvector: j as u32, flags: TAG_VALUE_LOOKUP };
                fetch_indices(&mut p, mask, layout, Stream::Value, j, tokens, Stage::Atnv);
                let cb0 = layout.centroid_row(0, Stream::Value, j, w);
                match gather {
                    GatherSite::Bankpe => {
                        let per = split_tokens(n_w, &cb_entries, k_eff.max(1));
                        for (ri, &t) in per.iter().enumerate() {
                            if t == 0 {
                                continue;
                            }
                            let r = cb0 + ri as u64;
                            p.act(mask, r, Stage::Atnv, TAG_VALUE_LOOKUP, w, j);
                            let mut ret = p.col(Opcode::Ret, mask, r, (t as u64).div_ceil(value_per_col), Stage::Atnv);
                            ret.ops = t as u64 * sub_dim * g;
                            ret.meta = meta;
                            p.push(ret);
                            p.pre(mask, Stage::Atnv);
                        }
                    }
                    GatherSite::Bufferpe => {
                        // Codebook rows and indices go to the buffer die, which gathers
                        // each token's centroid and sends it back for the MACs.
                        let mut last = None;
                        for (ri, &e) in cb_entries.iter().enumerate() {
                            let r = cb0 + ri as u64;
                            p.act(mask, r, Stage::Atnv, TAG_VALUE_LOOKUP, w, j);
                            let b = e as u64 * sub_dim * 2;
                            let mut mv = p.col(Opcode::MvBa, mask, r, p.cols_for(b), Stage::Atnv);
                            mv.bytes = b;
                            mv.meta = meta;
                            last = Some(p.push(mv));
                            p.pre(mask, Stage::Atnv);
                        }
                        let gr = layout.gather_row();
                        p.act(mask, gr, Stage::Atnv, 0, w, j);
                        pipelined(
                            &mut p,
                            chunks(n_w, per_row),
                            |p, c| p.xfer(Opcode::MvBa, mask, c * 2, Stage::Atnv, last),
                            |p, idx, c| {
                                let gat = p.sfm(c * sub_dim * nb, Stage::Atnv, Some(idx));
                                let b = c * sub_dim * 2;
                                let mut back = p.col(Opcode::MvBf, mask, gr, p.cols_for(b), Stage::Atnv);
                                back.bytes = b;
                                back.dep = Some(gat);
                                let back = p.push(back);
                                let mut mac = p.col(Opcode::MacAb, mask, gr, p.cols_for(b), Stage::Atnv);
                                mac.ops = c * sub_dim * g;
                                mac.dep = Some(back);
                                mac.meta = meta;
                                p.push(mac);
                            },
                        );
                        p.pre(mask, Stage::Atnv);
                    }
                }
            }
            for (r, n, bytes) in fp_spans(layout, Stream::Value, j) {
                p.act(mask, r, Stage::Atnv, 0, 0, j);
                let mut mac = p.col(Opcode::MacAb, mask, r, p.cols_for(bytes), Stage::Atnv);
                mac.ops = n * sub_dim * g;
                p.push(mac);
                p.pre(mask, Stage::Atnv);
            }
            let last = p.q.len() as u32 - 1;
            p.xfer(Opcode::Rd, mask, g * sub_dim * 2, Stage::Transfer, Some(last));
        }
        trace.queues[ch] = p.q;
    }
    Ok(trace)
}

/// Reads a slot's stored indices for `tokens` into the register file.
fn fetch_indices(p: &mut Program, mask: u64, layout: &MemoryLayout, stream: Stream, slot: usize, tokens: Range<usize>, stage: Stage) {
    for (r, _, bytes) in index_spans(layout, stream, slot, tokens) {
        p.act(mask, r, stage, 0, 0, slot);
        let rd = p.col(Opcode::Rd, mask, r, p.cols_for(bytes), stage);
        p.push(rd);
        p.pre(mask, stage);
    }
}

/// Emits `head` for chunk i + 1 before `tail` for chunk i, so the in-order
/// queue does not stall the producer behind its consumers.
fn pipelined(
    p: &mut Program,
    items: impl Iterator<Item = u64>,
    mut head: impl FnMut(&mut Program, u64) -> u32,
    mut tail: impl FnMut(&mut Program, u32, u64),
) {
    let mut prev = None;
    for c in items {
        let h = head(p, c);
        if let Some((ph, pc)) = prev {
            tail(p, ph, pc);
        }
        prev = Some((h, c));
    }
    if let Some((ph, pc)) = prev {
        tail(p, ph, pc);
    }
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = u64> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(move |i| (size.min(n - i * size)) as u64)
}

/// Bank masks grouping the banks of each unit present on a channel.
fn unit_masks(slots: &[Vec<(usize, usize)>]) -> Vec<u64> {
    let mut by_unit: std::collections::BTreeMap<usize, u64> = Default::default();
    for (b, s) in slots.iter().enumerate() {
        for &(u, _) in s {
            *by_unit.entry(u).or_default() |= 1 << b;
        }
    }
    by_unit.into_values().collect()
}

/// One decode step of one layer with the uncompressed cache spread token-wise
/// over each unit's banks; every bank scores its own tokens with MACs.
pub fn trace_dense_decode(workload: &Workload, placement: &Placement, hw: &PimConfig) -> Result<CommandTrace> {
    workload.validate()?;
    hw.validate()?;
    let model = &workload.model;
    let d = model.head_dim as u64;
    let g = model.group() as u64;
    let seq = workload.seq_in as u64;
    let row = hw.row_buffer_bytes as u64;
    let mut trace = CommandTrace::new(
        Phase::DecodeStep,
        hw.total_channels(),
        hw.channels_per_hbm,
        format!(
            "dense batch={} seq={} heads={}/{} d={}",
            workload.batch, workload.seq_in, model.n_heads, model.n_kv_heads, model.head_dim
        ),
    );
    trace.inter_hbm_bytes = inter_hbm_bytes(placement);

    // Channel -> bank -> (unit, banks the unit spans).
    let mut banks: Vec<Vec<Option<(usize, u64)>>> = vec![vec![None; hw.banks_per_channel]; hw.total_channels()];
    for (ui, u) in placement.units.iter().enumerate() {
        let mut own: Vec<usize> = u.subvector_bank.clone();
        own.sort_unstable();
        own.dedup();
        for &b in &own {
            let ch = u.hbm * hw.channels_per_hbm + b / hw.banks_per_channel;
            banks[ch][b % hw.banks_per_channel] = Some((ui, own.len() as u64));
        }
    }
    for (ch, bank_units) in banks.iter().enumerate() {
        let mask = mask_of(bank_units.iter().enumerate().filter(|(_, u)| u.is_some()).map(|(b, _)| b));
        if mask == 0 {
            continue;
        }
        let nb = bank_count(mask);
        let tokens = bank_units.iter().flatten().map(|&(_, w)| seq.div_ceil(w)).max().unwrap_or(0);
        let mut p = Program::new(hw);
        p.push(PimCommand::new(Opcode::SetConfig, mask, Stage::Transfer));
        p.xfer(Opcode::Wr, mask, g * d * 2, Stage::Transfer, None);
        let kv_rows = (tokens * d * 2).div_ceil(row);
        let token_bytes = d * 2;
        for (s, (stage, base)) in [(Stage::Atnk, 0u64), (Stage::Atnv, kv_rows)].into_iter().enumerate() {
            let spans = row_spans(base, 0, token_bytes, 0..tokens as usize, row);
            if s == 0 {
                if let Some(&(r, _, _)) = spans.last() {
                    for rr in [r, r + kv_rows] {
                        p.act(mask, rr, Stage::Transfer, 0, 0, 0);
                        let mut wr = p.col(Opcode::Wr, mask, rr, p.cols_for(token_bytes), Stage::Transfer);
                        wr.bytes = token_bytes;
                        p.push(wr);
                        p.pre(mask, Stage::Transfer);
                    }
                }
            } else {
                // Probabilities for each bank's own tokens.
                let homes = home_units(placement, hw, ch);
                let before = Some(p.q.len() as u32 - 1);
                let sfm = if homes.is_empty() {
                    before
                } else {
                    Some(p.sfm(SOFTMAX_OPS_PER_SCORE * seq * g * homes.len() as u64, Stage::Sfm, before))
                };
                p.xfer(Opcode::MvBf, mask, tokens * g * 2, Stage::Sfm, sfm);
            }
            let mut last = None;
            for (r, n, bytes) in spans {
                p.act(mask, r, stage, 0, 0, 0);
                let mut mac = p.col(Opcode::MacAb, mask, r, p.cols_for(bytes), stage);
                mac.ops = n * d * g;
                last = Some(p.push(mac));
                p.pre(mask, stage);
            }
            if s == 0 {
                p.xfer(Opcode::MvBa, mask, tokens * g * 2, Stage::Atnk, last);
            } else {
                let mv = p.xfer(Opcode::MvBa, mask, g * d * 2, Stage::Atnv, last);
                p.sfm(g * d * nb, Stage::Atnv, Some(mv));
            }
        }
        let last = p.q.len() as u32 - 1;
        let mut rd = PimCommand::new(Opcode::Rd, 0, Stage::Transfer);
        rd.bytes = g * d * 2 * home_units(placement, hw, ch).len() as u64;
        rd.broadcast = true;
        rd.dep = Some(last);
        p.push(rd);
        trace.queues[ch] = p.q;
    }
    Ok(trace)
}
