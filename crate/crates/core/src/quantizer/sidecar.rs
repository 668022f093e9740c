//! `AQPQ` sidecar: a compressed head serialized little-endian.
//!
//! ```text
//! "AQPQ" | version u32 | config echo (m k iters window_len sink recent t: u32,
//! rng_seed u64, row_buffer_bytes u32) | head_dim n_tokens k n_windows: u32 |
//! per window: start end u32 | perm_k, perm_v orders (u32 × head_dim) |
//! per stream, per window: n u32 + n f64 objectives |
//! key then value codebooks (window, subvector, centroid major; f32) |
//! key then value indices (token major, subvector minor; u16, 0xFFFF = full precision) |
//! key then value window ids (u32 per token) |
//! sink_len spill_len recent_len u32 | sink K, sink V, spill K, spill V, recent K, recent V (f32)
//! ```

use std::path::Path;

use super::codebook::{Codebook, CompressedKv, PqIndices, WindowCodebook, NO_WINDOW};
use super::config::PqConfig;
use crate::channel_sort::ChannelPermutation;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const PQ_MAGIC: [u8; 4] = *b"AQPQ";
pub const PQ_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_matrix<T: Scalar>(buf: &mut Vec<u8>, m: &Matrix<T>) {
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_single().to_le_bytes());
    }
}

pub fn encode_sidecar<T: Scalar>(ckv: &CompressedKv<T>) -> Vec<u8> {
    let mut b = PQ_MAGIC.to_vec();
    b.extend_from_slice(&PQ_VERSION.to_le_bytes());
    let c = &ckv.cfg;
    for v in [c.m, c.k, c.iters, c.window_len, c.sink_tokens, c.recent_tokens, c.t] {
        put_u32(&mut b, v);
    }
    b.extend_from_slice(&c.rng_seed.to_le_bytes());
    put_u32(&mut b, c.row_buffer_bytes);

    let kc = &ckv.key_codebook;
    let vc = &ckv.value_codebook;
    put_u32(&mut b, ckv.head_dim);
    put_u32(&mut b, ckv.n_tokens());
    put_u32(&mut b, kc.k());
    put_u32(&mut b, kc.n_windows());
    for w in kc.windows() {
        put_u32(&mut b, w.start);
        put_u32(&mut b, w.end);
    }
    for p in [&ckv.perm_k, &ckv.perm_v] {
        for &o in p.order() {
            put_u32(&mut b, o);
        }
    }
    for cb in [kc, vc] {
        for w in cb.windows() {
            put_u32(&mut b, w.objective_per_iter.len());
            for o in &w.objective_per_iter {
                b.extend_from_slice(&o.to_le_bytes());
            }
        }
    }
    for cb in [kc, vc] {
        for w in cb.windows() {
            for t in &w.tables {
                put_matrix(&mut b, t);
            }
        }
    }
    for idx in [&ckv.key_indices, &ckv.value_indices] {
        for c in idx.all_codes() {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    for idx in [&ckv.key_indices, &ckv.value_indices] {
        for w in idx.all_windows() {
            b.extend_from_slice(&w.to_le_bytes());
        }
    }
    put_u32(&mut b, ckv.sink_len());
    put_u32(&mut b, ckv.spill_len());
    put_u32(&mut b, ckv.recent_len());
    for m in [
        &ckv.sink_keys,
        &ckv.sink_values,
        &ckv.spill_keys,
        &ckv.spill_values,
        &ckv.recent_keys,
        &ckv.recent_values,
    ] {
        put_matrix(&mut b, m);
    }
    b
}

pub fn write_sidecar<T: Scalar>(ckv: &CompressedKv<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_sidecar(ckv))
}

fn read_matrix<T: Scalar>(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let needed = rows.saturating_mul(cols).saturating_mul(4);
    if needed > r.remaining() {
        return Err(Error::Truncated {
            offset: r.pos() as u64,
            needed: needed as u64,
            available: r.remaining() as u64,
        });
    }
    let data = (0..rows * cols)
        .map(|_| r.f32().map(T::from_single))
        .collect::<Result<Vec<T>>>()?;
    Matrix::from_vec(rows, cols, data)
}

fn read_indices(r: &mut ByteReader<'_>, m: usize, n: usize, k: usize) -> Result<Vec<u16>> {
    let needed = n.saturating_mul(m).saturating_mul(2);
    if needed > r.remaining() {
        return Err(Error::Truncated {
            offset: r.pos() as u64,
            needed: needed as u64,
            available: r.remaining() as u64,
        });
    }
    (0..n * m)
        .map(|_| {
            let offset = r.pos();
            let c = r.u16()?;
            if c != super::codebook::FP_SENTINEL && c as usize >= k {
                return Err(Error::Invalid(format!("index {c} >= k = {k} at byte {offset}")));
            }
            Ok(c)
        })
        .collect()
}

pub fn decode_sidecar<T: Scalar>(buf: &[u8]) -> Result<CompressedKv<T>> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4)?;
    if magic != PQ_MAGIC {
        return Err(Error::BadMagic {
            expected: PQ_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32()?;
    if version != PQ_VERSION {
        return Err(Error::UnsupportedVersion { version, offset: 4 });
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let cfg = PqConfig {
        m: f[0],
        k: f[1],
        iters: f[2],
        window_len: f[3],
        sink_tokens: f[4],
        recent_tokens: f[5],
        t: f[6],
        rng_seed: r.u64()?,
        row_buffer_bytes: r.u32()? as usize,
    };
    cfg.validate()?;
    let head_dim = r.u32()? as usize;
    cfg.check_head_dim(head_dim)?;
    let n = r.count(4)?;
    let k = r.u32()? as usize;
    if k > cfg.k {
        return Err(Error::Invalid(format!("codebook k {k} exceeds configured {}", cfg.k)));
    }
    let n_windows = r.count(8)?;
    let mut ranges = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        ranges.push((r.u32()? as usize, r.u32()? as usize));
    }
    let perm = |r: &mut ByteReader<'_>| -> Result<ChannelPermutation> {
        let order = (0..head_dim)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        ChannelPermutation::new(order, cfg.m)
    };
    let perm_k = perm(&mut r)?;
    let perm_v = perm(&mut r)?;

    let mut objectives = [Vec::new(), Vec::new()];
    for obj in &mut objectives {
        for _ in 0..n_windows {
            let len = r.count(8)?;
            obj.push((0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?);
        }
    }
    let sub_dim = head_dim / cfg.m;
    let mut codebooks = Vec::with_capacity(2);
    for obj in objectives {
        let mut windows = Vec::with_capacity(n_windows);
        for (&(start, end), objective_per_iter) in ranges.iter().zip(obj) {
            let tables = (0..cfg.m)
                .map(|_| read_matrix(&mut r, k, sub_dim))
                .collect::<Result<Vec<_>>>()?;
            windows.push(WindowCodebook {
                start,
                end,
                tables,
                objective_per_iter,
            });
        }
        codebooks.push(Codebook::new(cfg.m, k, sub_dim, windows));
    }
    let value_codebook = codebooks.pop().expect("two codebooks");
    let key_codebook = codebooks.pop().expect("two codebooks");

    let key_codes = read_indices(&mut r, cfg.m, n, k)?;
    let value_codes = read_indices(&mut r, cfg.m, n, k)?;
    let window_ids = |r: &mut ByteReader<'_>| -> Result<Vec<u32>> {
        (0..n)
            .map(|_| {
                let offset = r.pos();
                let w = r.u32()?;
                if w != NO_WINDOW && w as usize >= n_windows {
                    return Err(Error::Invalid(format!("window id {w} at byte {offset}")));
                }
                Ok(w)
            })
            .collect()
    };
    let key_windows = window_ids(&mut r)?;
    let value_windows = window_ids(&mut r)?;

    let sink = r.u32()? as usize;
    let spill = r.u32()? as usize;
    let recent = r.u32()? as usize;
    if sink + spill + recent > n {
        return Err(Error::Invalid(format!(
            "{sink} + {spill} + {recent} full-precision rows for {n} tokens"
        )));
    }
    let sink_keys = read_matrix(&mut r, sink, head_dim)?;
    let sink_values = read_matrix(&mut r, sink, head_dim)?;
    let spill_keys = read_matrix(&mut r, spill, head_dim)?;
    let spill_values = read_matrix(&mut r, spill, head_dim)?;
    let recent_keys = read_matrix(&mut r, recent, head_dim)?;
    let recent_values = read_matrix(&mut r, recent, head_dim)?;
    if r.remaining() != 0 {
        return Err(Error::TrailingData {
            offset: r.pos() as u64,
            extra: r.remaining() as u64,
        });
    }

    Ok(CompressedKv {
        cfg: cfg.clone(),
        head_dim,
        perm_k,
        perm_v,
        key_codebook,
        value_codebook,
        key_indices: PqIndices::from_parts(cfg.m, key_codes, key_windows),
        value_indices: PqIndices::from_parts(cfg.m, value_codes, value_windows),
        sink_keys,
        sink_values,
        spill_keys,
        spill_values,
        recent_keys,
        recent_values,
    })
}

pub fn read_sidecar<T: Scalar>(path: impl AsRef<Path>) -> Result<CompressedKv<T>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_sidecar(&buf)
}
