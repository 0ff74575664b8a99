//! Binary tensor container.
//!
//! Layout, all little-endian: magic `MFT1`, `u32` rank, `rank` x `u32`
//! extents, then `f32` payload in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"MFT1";
pub const MAX_RANK: usize = 4;

pub fn encode(tensor: &Tensor<f32>) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(Error::Format {
            offset: 4,
            detail: format!("rank {} exceeds {MAX_RANK}", tensor.rank()),
        });
    }
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format {
            offset: out.len(),
            detail: format!("extent {e} does not fit in u32"),
        })?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset,
            detail: format!("truncated: need 4 bytes, {} left", bytes.len().saturating_sub(offset)),
        })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected MFT1".into(),
        });
    }
    let rank = u32_at(bytes, 4)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format {
            offset: 4,
            detail: format!("rank {rank} outside 1..={MAX_RANK}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let offset = 8 + 4 * i;
        let e = u32_at(bytes, offset)? as usize;
        if e == 0 {
            return Err(Error::Format {
                offset,
                detail: "extent must be >= 1".into(),
            });
        }
        count = count.checked_mul(e).filter(|&c| c <= isize::MAX as usize / 4).ok_or_else(|| {
            Error::Format {
                offset,
                detail: "extent product overflows".into(),
            }
        })?;
        shape.push(e);
    }
    let start = 8 + 4 * rank;
    let expected = start + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            detail: format!("payload size mismatch: file has {} bytes, layout needs {expected}", bytes.len()),
        });
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let bytes = encode(tensor)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}
