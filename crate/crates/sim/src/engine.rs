//! Trace replay. Each channel issues its queue in order, at most one command per
//! cycle; a command starts once its dependency has finished and the resources it
//! needs are free. Resources: per-bank row state, per-bank-group column slots
//! (tCCDL), the channel's bank/buffer-die interface, and the stack's BufferPE,
//! which all channels of a stack share. Commands on different resources overlap.
//!
//! Channels advance in a global order by earliest possible start, so BufferPE
//! contention is resolved first come, first served.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::command::{CommandTrace, Opcode, PimCommand, Stage};
use crate::config::PimConfig;
use crate::error::Result;
use crate::report::{Counters, SimReport, StageBreakdown};

#[derive(Debug, Clone, Copy, Default)]
struct Bank {
    open: bool,
    act_at: u64,
    col_ready: u64,
    col_end: u64,
    pre_done: u64,
}

struct Channel {
    banks: Vec<Bank>,
    group_next_col: Vec<u64>,
    last_act: Option<u64>,
    tsv_free: u64,
    last_issue: Option<u64>,
    done: Vec<u64>,
    issue: Vec<u64>,
    intervals: Vec<Vec<(u64, u64)>>,
}

/// Issue times per channel alongside the report, for trace dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDetail {
    pub report: SimReport,
    pub issue: Vec<Vec<u64>>,
    pub completion: Vec<Vec<u64>>,
}

fn mask_banks(mask: u64, n: usize) -> impl Iterator<Item = usize> {
    (0..n).filter(move |b| mask >> b & 1 == 1)
}

fn union_length(iv: &mut [(u64, u64)]) -> u64 {
    iv.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for &(s, e) in iv.iter() {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

pub fn simulate(trace: &CommandTrace, hw: &PimConfig) -> Result<SimReport> {
    Ok(simulate_detailed(trace, hw)?.report)
}

pub fn simulate_detailed(trace: &CommandTrace, hw: &PimConfig) -> Result<SimDetail> {
    hw.validate()?;
    trace.check_legality(hw.banks_per_channel)?;
    let t = &hw.timings;
    let e = &hw.energies;
    let n_groups = hw.banks_per_channel / hw.banks_per_group;
    let n_stages = Stage::ALL.len();
    let mut chans: Vec<Channel> = trace
        .queues
        .iter()
        .map(|q| Channel {
            banks: vec![Bank::default(); hw.banks_per_channel],
            group_next_col: vec![0; n_groups],
            last_act: None,
            tsv_free: 0,
            last_issue: None,
            done: Vec::with_capacity(q.len()),
            issue: Vec::with_capacity(q.len()),
            intervals: vec![Vec::new(); n_stages],
        })
        .collect();
    let n_stacks = trace.queues.len().div_ceil(trace.channels_per_hbm.max(1));
    let mut bufferpe_free = vec![0u64; n_stacks];

    let mut counters = Counters {
        inter_hbm_bytes: trace.inter_hbm_bytes,
        ..Counters::default()
    };
    let mut energy = StageBreakdown::default();

    // Earliest start of a channel's next command ignoring the shared BufferPE.
    let lower_bound = |ch: &Channel, cmd: &PimCommand| -> u64 {
        let mut s = ch.last_issue.map_or(0, |v| v + 1);
        if let Some(d) = cmd.dep {
            s = s.max(ch.done[d as usize]);
        }
        s
    };

    let mut heap = BinaryHeap::new();
    for (c, q) in trace.queues.iter().enumerate() {
        if let Some(cmd) = q.first() {
            heap.push(Reverse((lower_bound(&chans[c], cmd), c)));
        }
    }

    while let Some(Reverse((ready, c))) = heap.pop() {
        let ch = &mut chans[c];
        let i = ch.done.len();
        let cmd = &trace.queues[c][i];
        let banks: Vec<usize> = mask_banks(cmd.bank_mask, hw.banks_per_channel).collect();
        let nb = banks.len() as u64;
        let tsv_bytes = cmd.tsv_bytes();
        let tsv_dur = tsv_bytes.div_ceil(hw.tsv_bytes_per_cycle);
        let (start, end) = match cmd.opcode {
            Opcode::SetConfig => (ready, ready + 1),
            Opcode::ActAb => {
                let mut s = ready;
                for &b in &banks {
                    s = s.max(ch.banks[b].pre_done);
                }
                if let Some(a) = ch.last_act {
                    s = s.max(a + t.t_rrd);
                }
                for &b in &banks {
                    let bank = &mut ch.banks[b];
                    bank.open = true;
                    bank.act_at = s;
                    bank.col_ready = s + t.t_rcd;
                }
                ch.last_act = Some(s);
                counters.acts += nb;
                energy[cmd.stage] += e.e_act * nb as f64;
                (s, s + t.t_rcd)
            }
            Opcode::Pre => {
                let mut s = ready;
                for &b in &banks {
                    let bank = &ch.banks[b];
                    s = s.max(bank.act_at + t.t_ras).max(bank.col_end);
                }
                for &b in &banks {
                    let bank = &mut ch.banks[b];
                    bank.open = false;
                    bank.pre_done = s + t.t_rp;
                }
                (s, s + t.t_rp)
            }
            Opcode::Sfm => {
                let stack = c / trace.channels_per_hbm.max(1);
                let s = ready.max(bufferpe_free[stack]);
                let dur = cmd.ops.div_ceil(hw.bufferpe_throughput).max(1);
                bufferpe_free[stack] = s + dur;
                counters.bufferpe_ops += cmd.ops;
                energy[cmd.stage] += e.e_bufferpe_op * cmd.ops as f64;
                (s, s + dur)
            }
            _ if cmd.touches_row() => {
                let mut s = ready;
                for &b in &banks {
                    s = s.max(ch.banks[b].col_ready);
                    s = s.max(ch.group_next_col[hw.bank_group(b)]);
                }
                if cmd.opcode.is_transfer() {
                    s = s.max(ch.tsv_free);
                }
                let reps = cmd.repeat as u64;
                let mut col_span = reps * t.t_ccdl;
                if matches!(cmd.opcode, Opcode::MacAb | Opcode::Ret) {
                    col_span = col_span.max(cmd.ops.div_ceil(hw.bankpe_lanes as u64));
                }
                let reads = cmd.reads_columns();
                let mut end = if reads {
                    s + col_span - t.t_ccdl + t.t_cl
                } else {
                    s + col_span
                };
                if cmd.opcode.is_transfer() {
                    end = end.max(s + tsv_dur);
                    ch.tsv_free = s + tsv_dur;
                }
                for &b in &banks {
                    ch.banks[b].col_end = s + col_span;
                    let g = hw.bank_group(b);
                    ch.group_next_col[g] = s + col_span;
                }
                if reads {
                    counters.col_reads += reps * nb;
                    energy[cmd.stage] += e.e_rd_col * (reps * nb) as f64;
                } else {
                    counters.col_writes += reps * nb;
                    energy[cmd.stage] += e.e_wr_col * (reps * nb) as f64;
                }
                if matches!(cmd.opcode, Opcode::MacAb | Opcode::Ret) {
                    counters.macs += cmd.ops * nb;
                    energy[cmd.stage] += e.e_mac16 * (cmd.ops * nb) as f64;
                }
                (s, end)
            }
            _ => {
                // Register-to-buffer-die transfers.
                let s = ready.max(ch.tsv_free);
                ch.tsv_free = s + tsv_dur;
                (s, s + tsv_dur.max(1))
            }
        };
        counters.tsv_bytes += tsv_bytes;
        energy[cmd.stage] += e.e_tsv_per_bit * 8.0 * tsv_bytes as f64;
        ch.last_issue = Some(start);
        ch.issue.push(start);
        ch.done.push(end);
        // Time spent waiting for a shared resource counts toward the stage.
        ch.intervals[cmd.stage as usize].push((ready.min(start), end));
        if let Some(next) = trace.queues[c].get(i + 1) {
            let lb = lower_bound(ch, next);
            heap.push(Reverse((lb, c)));
        }
    }

    let mut by_stage = StageBreakdown::default();
    let mut cycles_total = 0u64;
    let mut max_busy = 0u64;
    for ch in &mut chans {
        cycles_total = cycles_total.max(ch.done.iter().copied().max().unwrap_or(0));
        let mut all: Vec<(u64, u64)> = Vec::new();
        for (si, iv) in ch.intervals.iter_mut().enumerate() {
            all.extend_from_slice(iv);
            let len = union_length(iv) as f64;
            let s = Stage::ALL[si];
            by_stage[s] = by_stage[s].max(len);
        }
        max_busy = max_busy.max(union_length(&mut all));
    }
    let report = SimReport {
        label: trace.workload.clone(),
        cycles_total: cycles_total as f64,
        cycles_by_stage: by_stage,
        energy_by_stage: energy,
        counters,
        max_channel_busy: max_busy as f64,
        ..SimReport::default()
    };
    Ok(SimDetail {
        report,
        issue: chans.iter().map(|c| c.issue.clone()).collect(),
        completion: chans.into_iter().map(|c| c.done).collect(),
    })
}
