//! Little-endian byte layouts for quantized shards and reduction lanes.
//!
//! Dense shard:
//! ```text
//! [norm: f64][d: u32][sign bitmap: ceil(d/8) bytes, 1 = negative][level idx: d x w bits]
//! ```
//! Sparse payload:
//! ```text
//! [norm: f64][d: u32][nnz: u32][indices: nnz x u32][sign bitmap over nnz][level idx: nnz x w bits]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantizedShard, SparsePayload};

/// Bits per wire integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    W8,
    W16,
    W32,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::W8, Width::W16, Width::W32];

    pub fn bits(self) -> u32 {
        match self {
            Width::W8 => 8,
            Width::W16 => 16,
            Width::W32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(Width::W8),
            16 => Ok(Width::W16),
            32 => Ok(Width::W32),
            _ => Err(Error::invalid_arg(format!("unsupported width {bits}; use 8, 16 or 32"))),
        }
    }

    pub fn max_unsigned(self) -> u64 {
        (1u64 << self.bits()) - 1
    }

    pub fn signed_range(self) -> (i64, i64) {
        let half = 1i64 << (self.bits() - 1);
        (-half, half - 1)
    }
}

pub(crate) fn put_uint(out: &mut Vec<u8>, v: u64, w: Width) {
    match w {
        Width::W8 => out.push(v as u8),
        Width::W16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
        Width::W32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
    }
}

pub(crate) fn get_uint(bytes: &[u8], w: Width) -> u64 {
    match w {
        Width::W8 => u64::from(bytes[0]),
        Width::W16 => u64::from(u16::from_le_bytes([bytes[0], bytes[1]])),
        Width::W32 => u64::from(u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])),
    }
}

pub(crate) fn put_int(out: &mut Vec<u8>, v: i64, w: Width) -> Result<()> {
    let (lo, hi) = w.signed_range();
    if v < lo || v > hi {
        return Err(Error::OverflowDetected(format!(
            "{v} does not fit a signed {}-bit integer",
            w.bits()
        )));
    }
    put_uint(out, v as u64 & w.max_unsigned(), w);
    Ok(())
}

pub(crate) fn get_int(bytes: &[u8], w: Width) -> i64 {
    let raw = get_uint(bytes, w);
    let shift = 64 - w.bits();
    ((raw << shift) as i64) >> shift
}

/// Byte cursor that turns short reads into `CorruptPayload`.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::corrupt(format!("truncated payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_signs(out: &mut Vec<u8>, signs: &[i8]) {
    let start = out.len();
    out.resize(start + signs.len().div_ceil(8), 0);
    for (j, &sg) in signs.iter().enumerate() {
        if sg < 0 {
            out[start + j / 8] |= 1 << (j % 8);
        }
    }
}

fn get_signs(r: &mut Reader<'_>, count: usize) -> Result<Vec<i8>> {
    let bits = r.take(count.div_ceil(8))?;
    Ok((0..count)
        .map(|j| if bits[j / 8] >> (j % 8) & 1 == 1 { -1 } else { 1 })
        .collect())
}

fn check_levels_fit(levels: &[u32], w: Width) -> Result<()> {
    if let Some(&l) = levels.iter().find(|&&l| u64::from(l) > w.max_unsigned()) {
        return Err(Error::invalid_arg(format!(
            "level index {l} does not fit {} bits",
            w.bits()
        )));
    }
    Ok(())
}

fn len_u32(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::invalid_arg(format!("{what} {len} exceeds u32")))
}

pub fn dense_len(d: usize, w: Width) -> usize {
    8 + 4 + d.div_ceil(8) + d * w.bytes()
}

pub fn sparse_len(nnz: usize, w: Width) -> usize {
    8 + 4 + 4 + 4 * nnz + nnz.div_ceil(8) + nnz * w.bytes()
}

pub fn encode_dense(shard: &QuantizedShard, w: Width) -> Result<Vec<u8>> {
    check_levels_fit(&shard.level_idx, w)?;
    let d = shard.d();
    let mut out = Vec::with_capacity(dense_len(d, w));
    out.extend_from_slice(&shard.norm.to_le_bytes());
    out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
    put_signs(&mut out, &shard.signs);
    for &l in &shard.level_idx {
        put_uint(&mut out, u64::from(l), w);
    }
    Ok(out)
}

pub fn decode_dense(bytes: &[u8], w: Width) -> Result<QuantizedShard> {
    let mut r = Reader::new(bytes);
    let norm = r.f64()?;
    let d = r.u32()? as usize;
    let signs = get_signs(&mut r, d)?;
    let raw = r.take(d.checked_mul(w.bytes()).ok_or_else(|| Error::corrupt("length overflow"))?)?;
    let level_idx = raw.chunks_exact(w.bytes()).map(|c| get_uint(c, w) as u32).collect();
    r.finish()?;
    Ok(QuantizedShard {
        signs,
        level_idx,
        norm,
    })
}

pub fn encode_sparse(norm: f64, payload: &SparsePayload, w: Width) -> Result<Vec<u8>> {
    check_levels_fit(&payload.level_idx, w)?;
    let nnz = payload.nnz();
    let mut out = Vec::with_capacity(sparse_len(nnz, w));
    out.extend_from_slice(&norm.to_le_bytes());
    out.extend_from_slice(&payload.d.to_le_bytes());
    out.extend_from_slice(&len_u32(nnz, "nnz")?.to_le_bytes());
    for &i in &payload.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    put_signs(&mut out, &payload.signs);
    for &l in &payload.level_idx {
        put_uint(&mut out, u64::from(l), w);
    }
    Ok(out)
}

/// Decode a sparse payload; structural validity against a grid is checked
/// separately by [`SparsePayload::validate`].
pub fn decode_sparse(bytes: &[u8], w: Width) -> Result<(f64, SparsePayload)> {
    let mut r = Reader::new(bytes);
    let norm = r.f64()?;
    let d = r.u32()?;
    let nnz = r.u32()? as usize;
    let idx_bytes = r.take(nnz.checked_mul(4).ok_or_else(|| Error::corrupt("length overflow"))?)?;
    let indices = idx_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let signs = get_signs(&mut r, nnz)?;
    let raw = r.take(nnz.checked_mul(w.bytes()).ok_or_else(|| Error::corrupt("length overflow"))?)?;
    let level_idx = raw.chunks_exact(w.bytes()).map(|c| get_uint(c, w) as u32).collect();
    r.finish()?;
    Ok((
        norm,
        SparsePayload {
            d,
            indices,
            signs,
            level_idx,
        },
    ))
}
