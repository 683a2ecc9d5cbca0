//! The `RXF1` binary matrix format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"RXF1"
//! 4       4     dtype  u32 LE, 1 = f32
//! 8       8     rows   u64 LE
//! 16      8     cols   u64 LE
//! 24      4*r*c payload, f32 LE, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RXF1";
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one matrix from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8], path: &Path) -> Result<(Tensor<f32>, usize)> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("missing RXF1 magic".into()));
    }
    let dtype = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {dtype}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("size overflow".into()))?;
    let end = HEADER_LEN + payload;
    if bytes.len() < end {
        return Err(bad(format!(
            "{rows}x{cols} needs {payload} payload bytes, found {}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(rows, cols, data)?, end))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let (t, used) = decode_prefix(bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    crate::io::write_atomic(path, &encode(t))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
