//! PIM commands, per-channel command queues and the bank protocol checker.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Opcode {
    SetConfig,
    ActAb,
    MacAb,
    Sfm,
    Ret,
    MvBa,
    MvBf,
    Rd,
    Wr,
    Pre,
}

impl Opcode {
    pub fn name(self) -> &'static str {
        match self {
            Opcode::SetConfig => "SET_CONFIG",
            Opcode::ActAb => "ACT_AB",
            Opcode::MacAb => "MAC_AB",
            Opcode::Sfm => "SFM",
            Opcode::Ret => "RET",
            Opcode::MvBa => "MV_BA",
            Opcode::MvBf => "MV_BF",
            Opcode::Rd => "RD",
            Opcode::Wr => "WR",
            Opcode::Pre => "PRE",
        }
    }

    /// Commands that move bytes between the banks and the buffer die or host.
    pub fn is_transfer(self) -> bool {
        matches!(self, Opcode::MvBa | Opcode::MvBf | Opcode::Rd | Opcode::Wr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    QkvGen,
    Transfer,
    Atnk,
    Sfm,
    Atnv,
    Retrieval,
    ClusterDc,
    ClusterCa,
    ClusterCc,
    FfnGpu,
    ProjGpu,
    Pcie,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::QkvGen,
        Stage::Transfer,
        Stage::Atnk,
        Stage::Sfm,
        Stage::Atnv,
        Stage::Retrieval,
        Stage::ClusterDc,
        Stage::ClusterCa,
        Stage::ClusterCc,
        Stage::FfnGpu,
        Stage::ProjGpu,
        Stage::Pcie,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::QkvGen => "qkv_gen",
            Stage::Transfer => "transfer",
            Stage::Atnk => "atnk",
            Stage::Sfm => "sfm",
            Stage::Atnv => "atnv",
            Stage::Retrieval => "retrieval",
            Stage::ClusterDc => "cluster_dc",
            Stage::ClusterCa => "cluster_ca",
            Stage::ClusterCc => "cluster_cc",
            Stage::FfnGpu => "ffn_gpu",
            Stage::ProjGpu => "proj_gpu",
            Stage::Pcie => "pcie",
        }
    }
}

/// Marks the row activations that open a lookup table for intra-row indirection.
pub const TAG_KEY_LOOKUP: u8 = 1;
/// Marks value-side RET streams and their table activations.
pub const TAG_VALUE_LOOKUP: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Meta {
    pub window: u32,
    pub subvector: u32,
    pub flags: u8,
}

/// One command, issued to every bank in `bank_mask` of its channel in lockstep.
///
/// `repeat` column operations are issued back to back. `bytes` is the per-bank
/// payload of a transfer; a `broadcast` transfer carries one copy for all banks.
/// `ops` counts MACs per bank for `MAC_AB`, or BufferPE operations for `SFM`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimCommand {
    pub opcode: Opcode,
    pub bank_mask: u64,
    pub row: u64,
    pub col: u32,
    pub repeat: u32,
    pub bytes: u64,
    pub ops: u64,
    /// Transfer reads or writes DRAM columns of the open row (rather than registers).
    pub dram: bool,
    pub broadcast: bool,
    /// Queue index of a command on the same channel that must finish first.
    pub dep: Option<u32>,
    pub stage: Stage,
    pub meta: Meta,
}

impl PimCommand {
    pub fn new(opcode: Opcode, bank_mask: u64, stage: Stage) -> Self {
        Self {
            opcode,
            bank_mask,
            row: 0,
            col: 0,
            repeat: 1,
            bytes: 0,
            ops: 0,
            dram: false,
            broadcast: false,
            dep: None,
            stage,
            meta: Meta::default(),
        }
    }

    pub fn banks(&self) -> u32 {
        self.bank_mask.count_ones()
    }

    /// Whether the command issues column accesses to the open row.
    pub fn touches_row(&self) -> bool {
        match self.opcode {
            Opcode::MacAb | Opcode::Ret => true,
            op if op.is_transfer() => self.dram,
            _ => false,
        }
    }

    /// Column reads per bank (writes for `MV_BF`/`WR`).
    pub fn columns(&self) -> u64 {
        if self.touches_row() {
            self.repeat as u64
        } else {
            0
        }
    }

    pub fn reads_columns(&self) -> bool {
        self.touches_row() && !matches!(self.opcode, Opcode::MvBf | Opcode::Wr)
    }

    /// Bytes crossing the channel's bank/buffer-die interface.
    pub fn tsv_bytes(&self) -> u64 {
        if !self.opcode.is_transfer() {
            0
        } else if self.broadcast {
            self.bytes
        } else {
            self.bytes * self.banks() as u64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PrefillCluster,
    DecodeStep,
}

/// Ordered per-channel command queues, channels numbered `hbm * channels_per_hbm + channel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandTrace {
    pub phase: Phase,
    pub channels_per_hbm: usize,
    pub queues: Vec<Vec<PimCommand>>,
    /// Bytes that would cross between stacks; nonzero only if a unit spans stacks.
    pub inter_hbm_bytes: u64,
    /// Free-form description of the workload that produced the trace.
    pub workload: String,
}

impl CommandTrace {
    pub fn new(phase: Phase, n_channels: usize, channels_per_hbm: usize, workload: String) -> Self {
        Self {
            phase,
            channels_per_hbm,
            queues: vec![Vec::new(); n_channels],
            inter_hbm_bytes: 0,
            workload,
        }
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn commands(&self) -> impl Iterator<Item = (usize, &PimCommand)> {
        self.queues.iter().enumerate().flat_map(|(c, q)| q.iter().map(move |cmd| (c, cmd)))
    }

    /// Commands on channel `c` matching `f`, counted per bank (`ACT_AB` to 4 banks counts 4).
    pub fn count_per_bank(&self, c: usize, bank: usize, f: impl Fn(&PimCommand) -> bool) -> u64 {
        self.queues[c]
            .iter()
            .filter(|cmd| cmd.bank_mask >> bank & 1 == 1 && f(cmd))
            .count() as u64
    }

    /// Checks per-bank row protocol: ACT only on a closed bank, column accesses
    /// only to the open row, PRE only on an open bank, and dependencies pointing
    /// backwards. Banks may be left open at the end of a queue.
    pub fn check_legality(&self, banks_per_channel: usize) -> Result<()> {
        for (c, queue) in self.queues.iter().enumerate() {
            let mut open: Vec<Option<u64>> = vec![None; banks_per_channel];
            let valid_mask = if banks_per_channel == 64 {
                u64::MAX
            } else {
                (1u64 << banks_per_channel) - 1
            };
            for (i, cmd) in queue.iter().enumerate() {
                let err = |reason: String| SimError::Protocol {
                    channel: c,
                    index: i,
                    reason,
                };
                if cmd.bank_mask & !valid_mask != 0 {
                    return Err(err(format!("bank mask {:#x} names missing banks", cmd.bank_mask)));
                }
                if let Some(d) = cmd.dep {
                    if d as usize >= i {
                        return Err(err(format!("depends on later command {d}")));
                    }
                }
                if cmd.repeat == 0 {
                    return Err(err("zero repeat count".into()));
                }
                let banks = (0..banks_per_channel).filter(|b| cmd.bank_mask >> b & 1 == 1);
                match cmd.opcode {
                    Opcode::ActAb => {
                        for b in banks {
                            if let Some(r) = open[b] {
                                return Err(err(format!("ACT to bank {b} with row {r} still open")));
                            }
                            open[b] = Some(cmd.row);
                        }
                    }
                    Opcode::Pre => {
                        for b in banks {
                            if open[b].take().is_none() {
                                return Err(err(format!("PRE to closed bank {b}")));
                            }
                        }
                    }
                    _ if cmd.touches_row() => {
                        for b in banks {
                            match open[b] {
                                Some(r) if r == cmd.row => {}
                                Some(r) => {
                                    return Err(err(format!(
                                        "{} to row {} of bank {b} while row {r} is open",
                                        cmd.opcode.name(),
                                        cmd.row
                                    )))
                                }
                                None => {
                                    return Err(err(format!(
                                        "{} to bank {b} without an open row",
                                        cmd.opcode.name()
                                    )))
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// One line per command: issue cycle, channel, bank mask, opcode, row, col,
    /// bytes, tag. `issue` holds per-channel issue cycles from a simulation.
    pub fn dump(&self, issue: &[Vec<u64>]) -> String {
        let mut out = String::new();
        for (c, queue) in self.queues.iter().enumerate() {
            for (i, cmd) in queue.iter().enumerate() {
                let cycle = issue.get(c).and_then(|v| v.get(i)).copied().unwrap_or(0);
                let _ = writeln!(
                    out,
                    "{cycle}\t{c}\t{:#x}\t{}\t{}\t{}\t{}\t{}:w{}s{}x{}",
                    cmd.bank_mask,
                    cmd.opcode.name(),
                    cmd.row,
                    cmd.col,
                    cmd.tsv_bytes(),
                    cmd.stage.name(),
                    cmd.meta.window,
                    cmd.meta.subvector,
                    cmd.repeat
                );
            }
        }
        out
    }
}
