//! Per-bank row allocation. From row 0 upward: the codebook region (fixed for
//! the whole run), the prefill index region (page-granular per layer, also holding
//! the full-precision sink/recent rows), then the buffer region (reused by every
//! layer). Decode-time index pages grow into the buffer region.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use aqpim_core::quantizer::PqConfig;

use crate::config::PimConfig;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutInputs {
    pub pq: PqConfig,
    pub seq_len: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    /// Largest number of subvectors any one bank holds.
    pub subvectors_per_bank: usize,
    /// Query heads sharing each KV head.
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: u64,
    pub rows: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.start + self.rows
    }
    pub fn range(&self) -> Range<u64> {
        self.start..self.end()
    }
    pub fn overlaps(&self, other: &Region) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub codebook_region: Region,
    pub pq_index_region: Region,
    pub buffer_region: Region,
    pub row_bytes: u64,
    pub n_layers: usize,
    pub spb: usize,
    pub sub_dim: usize,
    pub n_windows: usize,
    /// Tokens per window, last window possibly shorter.
    pub window_tokens: Vec<usize>,
    pub n_quantized: usize,
    pub n_full_precision: usize,
    /// Rows holding one subvector's centroids for one window and one stream.
    pub centroid_rows: u64,
    /// Rows holding one lookup table (`k` 16-bit entries).
    pub table_rows_per_slice: u64,
    /// Index rows of one layer (both streams, all subvectors on the bank).
    pub index_rows_per_layer: u64,
    /// Full-precision rows of one layer.
    pub fp_rows_per_layer: u64,
    pub group: usize,
}

/// Which of a head's two caches a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Key = 0,
    Value = 1,
}

pub fn allocate(inputs: &LayoutInputs, hw: &PimConfig) -> Result<MemoryLayout> {
    let pq = &inputs.pq;
    pq.validate()?;
    pq.check_head_dim(inputs.head_dim)?;
    pq.check_page_residency(hw.row_buffer_bytes)?;
    let row = hw.row_buffer_bytes as u64;
    let spb = inputs.subvectors_per_bank as u64;
    let sub_dim = (inputs.head_dim / pq.m) as u64;
    let layers = inputs.n_layers as u64;
    let q = pq.n_quantized(inputs.seq_len);
    let n_windows = pq.n_windows(q);
    let window_tokens: Vec<usize> = (0..n_windows)
        .map(|w| {
            let len = if pq.window_len == 0 { q } else { pq.window_len };
            len.min(q - w * len)
        })
        .collect();
    let fp = inputs.seq_len - q;

    let centroid_rows = (pq.k as u64 * sub_dim * 2).div_ceil(row);
    let table_rows_per_slice = (pq.k as u64 * 2).div_ceil(row);
    let codebook_rows = layers * 2 * spb * n_windows as u64 * centroid_rows;

    let index_rows_per_layer = (2 * spb * q as u64 * 2).div_ceil(row);
    let fp_rows_per_layer = (2 * spb * fp as u64 * sub_dim * 2).div_ceil(row);
    let index_rows = layers * (index_rows_per_layer + fp_rows_per_layer);

    let staging = (2 * spb * q as u64 * sub_dim * 2).div_ceil(row);
    let scratch = n_windows as u64 * spb * inputs.group as u64 * table_rows_per_slice + 1;
    let buffer_rows = staging.max(scratch);

    let total = codebook_rows + index_rows + buffer_rows;
    if total > hw.rows_per_bank as u64 {
        return Err(SimError::BankFull {
            codebook_rows,
            index_rows,
            buffer_rows,
            rows_per_bank: hw.rows_per_bank as u64,
        });
    }
    Ok(MemoryLayout {
        codebook_region: Region {
            start: 0,
            rows: codebook_rows,
        },
        pq_index_region: Region {
            start: codebook_rows,
            rows: index_rows,
        },
        buffer_region: Region {
            start: codebook_rows + index_rows,
            rows: buffer_rows,
        },
        row_bytes: row,
        n_layers: inputs.n_layers,
        spb: inputs.subvectors_per_bank,
        sub_dim: sub_dim as usize,
        n_windows,
        window_tokens,
        n_quantized: q,
        n_full_precision: fp,
        centroid_rows,
        table_rows_per_slice,
        index_rows_per_layer,
        fp_rows_per_layer,
        group: inputs.group,
    })
}

impl MemoryLayout {
    /// First centroid row of (layer, stream, slot, window).
    pub fn centroid_row(&self, layer: usize, stream: Stream, slot: usize, window: usize) -> u64 {
        let per_layer = 2 * self.spb as u64 * self.n_windows as u64 * self.centroid_rows;
        let i = ((stream as u64 * self.spb as u64 + slot as u64) * self.n_windows as u64 + window as u64)
            * self.centroid_rows;
        self.codebook_region.start + layer as u64 * per_layer + i
    }

    pub(crate) fn layer_index_base(&self, layer: usize) -> u64 {
        self.pq_index_region.start + layer as u64 * (self.index_rows_per_layer + self.fp_rows_per_layer)
    }

    /// Rows holding the 16-bit indices of quantized tokens `tokens` (positions
    /// counted within the quantized range) for one stream and bank slot.
    pub fn index_rows(&self, layer: usize, stream: Stream, slot: usize, tokens: Range<usize>) -> Range<u64> {
        if tokens.is_empty() {
            return 0..0;
        }
        let block = (stream as u64 * self.spb as u64 + slot as u64) * self.n_quantized as u64 * 2;
        let lo = (block + tokens.start as u64 * 2) / self.row_bytes;
        let hi = (block + tokens.end as u64 * 2 - 1) / self.row_bytes + 1;
        let base = self.layer_index_base(layer);
        base + lo..base + hi
    }

    /// Rows holding one slot's full-precision sink and recent subvectors.
    pub fn fp_rows(&self, layer: usize, stream: Stream, slot: usize) -> Range<u64> {
        let bytes = self.n_full_precision as u64 * self.sub_dim as u64 * 2;
        if bytes == 0 {
            return 0..0;
        }
        let block = (stream as u64 * self.spb as u64 + slot as u64) * bytes;
        let base = self.layer_index_base(layer) + self.index_rows_per_layer;
        base + block / self.row_bytes..base + (block + bytes - 1) / self.row_bytes + 1
    }

    /// Lookup-table row for (window, slot, query head in the group).
    pub fn table_row(&self, window: usize, slot: usize, qh: usize) -> u64 {
        let i = (window * self.spb + slot) * self.group + qh;
        self.buffer_region.start + i as u64 * self.table_rows_per_slice
    }

    /// Staging rows for one slot's raw prefill subvectors of one stream.
    pub fn staging_rows(&self, stream: Stream, slot: usize) -> Range<u64> {
        let bytes = self.n_quantized as u64 * self.sub_dim as u64 * 2;
        if bytes == 0 {
            return 0..0;
        }
        let block = (stream as u64 * self.spb as u64 + slot as u64) * bytes;
        let base = self.buffer_region.start;
        base + block / self.row_bytes..base + (block + bytes - 1) / self.row_bytes + 1
    }

    /// Scratch row receiving data gathered at the buffer die.
    pub fn gather_row(&self) -> u64 {
        self.buffer_region.end() - 1
    }

    /// Decode tokens that fit before appended index pages reach the end of the bank.
    pub fn decode_capacity_tokens(&self, rows_per_bank: u64) -> u64 {
        let free_rows = rows_per_bank - self.pq_index_region.end();
        let per_token_bytes = self.n_layers as u64 * 2 * self.spb as u64 * 2;
        if per_token_bytes == 0 {
            return u64::MAX;
        }
        free_rows * self.row_bytes / per_token_bytes
    }

    pub fn regions(&self) -> [Region; 3] {
        [self.codebook_region, self.pq_index_region, self.buffer_region]
    }
}
