//! `AQKV` binary dump: 32-byte little-endian header, keys, values, optional f32 weights.
//!
//! ```text
//! 0..4    magic "AQKV"
//! 4..8    version (u32 = 1)
//! 8..12   flags   (bit 0: weights present)
//! 12..32  n_layers, n_kv_heads, n_tokens, head_dim, dtype_code (u32 each)
//! keys    layer-major, head-major, token-major, dim-minor; dtype scalars
//! values  same order
//! weights n_layers * n_kv_heads * n_tokens f32 (only if flag bit 0)
//! ```

use std::io::Write;
use std::path::Path;

use half::{bf16, f16};

use super::{DType, KvDump};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const KV_MAGIC: [u8; 4] = *b"AQKV";
pub const KV_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const FLAG_WEIGHTS: u32 = 1;
const MAX_HEADS: usize = 1 << 20;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: available as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode_scalar(dtype: DType, b: &[u8]) -> f32 {
    match dtype {
        DType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        DType::F16 => f16::from_le_bytes([b[0], b[1]]).to_f32(),
        DType::Bf16 => bf16::from_le_bytes([b[0], b[1]]).to_f32(),
    }
}

fn read_block<T: Scalar>(
    cur: &mut Cursor<'_>,
    dtype: DType,
    count: usize,
) -> Result<Vec<T>> {
    let start = cur.pos;
    let size = dtype.size();
    let bytes = cur.take(count.checked_mul(size).ok_or_else(|| {
        Error::Dimension("payload size overflows".into())
    })?)?;
    let mut out = Vec::with_capacity(count);
    for (i, chunk) in bytes.chunks_exact(size).enumerate() {
        let v = decode_scalar(dtype, chunk);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                offset: (start + i * size) as u64,
                value: v,
            });
        }
        out.push(T::from_single(v));
    }
    Ok(out)
}

/// Parses a dump from memory.
pub fn read_kv_dump<T: Scalar>(buf: &[u8]) -> Result<KvDump<T>> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4)?;
    if magic != KV_MAGIC {
        return Err(Error::BadMagic {
            expected: KV_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32()?;
    if version != KV_VERSION {
        return Err(Error::UnsupportedVersion { version, offset: 4 });
    }
    let flags = cur.u32()?;
    let n_layers = cur.u32()? as usize;
    let n_kv_heads = cur.u32()? as usize;
    let n_tokens = cur.u32()? as usize;
    let head_dim = cur.u32()? as usize;
    let dtype_code = cur.u32()?;
    let dtype = DType::from_code(dtype_code).ok_or(Error::UnknownDtype {
        code: dtype_code,
        offset: 28,
    })?;
    debug_assert_eq!(cur.pos, HEADER_LEN);

    let heads = n_layers
        .checked_mul(n_kv_heads)
        .ok_or_else(|| Error::Dimension("header dimensions overflow".into()))?;
    let per_head = n_tokens
        .checked_mul(head_dim)
        .ok_or_else(|| Error::Dimension("header dimensions overflow".into()))?;
    let per_block = heads
        .checked_mul(per_head)
        .ok_or_else(|| Error::Dimension("header dimensions overflow".into()))?;
    // Empty per-head payloads cost nothing on disk, so bound the head count separately.
    if heads > MAX_HEADS {
        return Err(Error::Dimension(format!(
            "{heads} (layer, head) pairs exceed the supported {MAX_HEADS}"
        )));
    }

    let read_matrices = |cur: &mut Cursor<'_>| -> Result<Vec<Matrix<T>>> {
        // Size check up front so a bogus header cannot trigger a huge allocation.
        let needed = per_block.saturating_mul(dtype.size());
        if needed > cur.buf.len() - cur.pos {
            return Err(Error::Truncated {
                offset: cur.pos as u64,
                needed: needed as u64,
                available: (cur.buf.len() - cur.pos) as u64,
            });
        }
        (0..heads)
            .map(|_| {
                let data = read_block::<T>(cur, dtype, per_head)?;
                Matrix::from_vec(n_tokens, head_dim, data)
            })
            .collect()
    };
    let keys = read_matrices(&mut cur)?;
    let values = read_matrices(&mut cur)?;

    let weights = if flags & FLAG_WEIGHTS != 0 {
        let needed = heads.saturating_mul(n_tokens).saturating_mul(4);
        if needed > buf.len() - cur.pos {
            return Err(Error::Truncated {
                offset: cur.pos as u64,
                needed: needed as u64,
                available: (buf.len() - cur.pos) as u64,
            });
        }
        let mut w = Vec::with_capacity(heads);
        for _ in 0..heads {
            w.push(read_block::<T>(&mut cur, DType::F32, n_tokens)?);
        }
        Some(w)
    } else {
        None
    };
    if cur.pos != buf.len() {
        return Err(Error::TrailingData {
            offset: cur.pos as u64,
            extra: (buf.len() - cur.pos) as u64,
        });
    }
    Ok(KvDump::new(n_layers, n_kv_heads, keys, values, weights)?.with_dtype(dtype))
}

pub fn load_kv_dump<T: Scalar>(path: impl AsRef<Path>) -> Result<KvDump<T>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_kv_dump(&buf)
}

fn encode_scalar(dtype: DType, v: f32, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
        DType::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
        DType::Bf16 => out.extend_from_slice(&bf16::from_f32(v).to_le_bytes()),
    }
}

/// Serializes into any writer using the dump's own payload dtype.
pub fn write_kv_dump_to<T: Scalar>(dump: &KvDump<T>, w: &mut impl Write) -> std::io::Result<()> {
    let dtype = dump.dtype();
    let weights = dump.all_weights();
    let mut buf = Vec::with_capacity(
        HEADER_LEN + 2 * dump.all_keys().len() * dump.n_tokens() * dump.head_dim() * dtype.size(),
    );
    buf.extend_from_slice(&KV_MAGIC);
    let flags = if weights.is_some() { FLAG_WEIGHTS } else { 0 };
    for field in [
        KV_VERSION,
        flags,
        dump.n_layers() as u32,
        dump.n_kv_heads() as u32,
        dump.n_tokens() as u32,
        dump.head_dim() as u32,
        dtype.code(),
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for block in [dump.all_keys(), dump.all_values()] {
        for m in block {
            for v in m.as_slice() {
                encode_scalar(dtype, v.to_single(), &mut buf);
            }
        }
    }
    if let Some(ws) = weights {
        for w in ws {
            for v in w {
                buf.extend_from_slice(&v.to_single().to_le_bytes());
            }
        }
    }
    w.write_all(&buf)
}

pub fn write_kv_dump<T: Scalar>(dump: &KvDump<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_kv_dump_to(dump, &mut buf).expect("writing to a Vec cannot fail");
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(flags: u32, dims: [u32; 5]) -> Vec<u8> {
        let mut b = KV_MAGIC.to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&flags.to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn minimal_zero_file() {
        let mut b = header(0, [1, 1, 2, 4, 0]);
        b.extend(std::iter::repeat_n(0u8, 2 * 2 * 4 * 4));
        let d: KvDump<f32> = read_kv_dump(&b).unwrap();
        assert_eq!(d.n_tokens(), 2);
        assert_eq!(d.head_dim(), 4);
        assert!(d.keys(0, 0).unwrap().as_slice().iter().all(|v| *v == 0.0));
        assert!(d.values(0, 0).unwrap().as_slice().iter().all(|v| *v == 0.0));
        assert!(!d.has_weights());
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut b = header(0, [1, 1, 3, 4, 0]);
        b.extend(std::iter::repeat_n(0u8, 2 * 2 * 4 * 4));
        match read_kv_dump::<f32>(&b) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 80),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut b = header(0, [0, 0, 0, 0, 0]);
        b[0] = b'X';
        assert!(matches!(read_kv_dump::<f32>(&b), Err(Error::BadMagic { .. })));
        let b = header(0, [0, 0, 0, 0, 9]);
        assert!(matches!(
            read_kv_dump::<f32>(&b),
            Err(Error::UnknownDtype { code: 9, offset: 28 })
        ));
    }

    #[test]
    fn non_finite_reports_offset() {
        let mut b = header(0, [1, 1, 1, 2, 0]);
        b.extend_from_slice(&0f32.to_le_bytes());
        b.extend_from_slice(&f32::NAN.to_le_bytes());
        b.extend_from_slice(&[0u8; 8]);
        match read_kv_dump::<f32>(&b) {
            Err(Error::NonFinite { offset, .. }) => assert_eq!(offset, 36),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_flag_follows_presence() {
        let k = Matrix::<f32>::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let d = KvDump::new(1, 1, vec![k.clone()], vec![k.clone()], None).unwrap();
        let mut buf = Vec::new();
        write_kv_dump_to(&d, &mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()) & 1, 0);
        assert_eq!(buf.len(), 32 + 2 * 4 * 4);

        let d = d.with_weights(Some(vec![vec![0.5, 1.5]])).unwrap();
        let mut buf = Vec::new();
        write_kv_dump_to(&d, &mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()) & 1, 1);
        assert_eq!(buf.len(), 32 + 2 * 4 * 4 + 2 * 4);
        let back: KvDump<f32> = read_kv_dump(&buf).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn half_payload_widens() {
        let k = Matrix::<f32>::from_vec(1, 2, vec![0.5, -2.0]).unwrap();
        for dtype in [DType::F16, DType::Bf16] {
            let d = KvDump::new(1, 1, vec![k.clone()], vec![k.clone()], None)
                .unwrap()
                .with_dtype(dtype);
            let mut buf = Vec::new();
            write_kv_dump_to(&d, &mut buf).unwrap();
            assert_eq!(buf.len(), 32 + 2 * 2 * 2);
            let back: KvDump<f64> = read_kv_dump(&buf).unwrap();
            assert_eq!(back.keys(0, 0).unwrap().as_slice(), &[0.5, -2.0]);
            assert_eq!(back.dtype(), dtype);
        }
    }
}
