//! Binary tensor files: a 16-byte header followed by little-endian `f32` data.
//!
//! Header layout: magic `TBNT` (4 bytes), rank `u16`, reserved `u16` (zero),
//! then four `u16` dimensions (unused trailing dimensions are zero).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TBNT";
pub const HEADER_LEN: usize = 16;
const MAX_RANK: usize = 4;

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed(msg.into())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(crate::error::invalid(format!(
            "cannot encode rank {}",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for i in 0..MAX_RANK {
        let d = shape.get(i).copied().unwrap_or(0);
        let d = u16::try_from(d).map_err(|_| {
            crate::error::invalid(format!("dimension {d} exceeds the format limit"))
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], name: &str) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            name: name.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed(format!("{name}: bad magic")));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let rank = u16_at(4);
    if rank == 0 || rank > MAX_RANK || u16_at(6) != 0 {
        return Err(malformed(format!("{name}: bad header")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u16_at(8 + 2 * i)).collect();
    if (rank..MAX_RANK).any(|i| u16_at(8 + 2 * i) != 0) {
        return Err(malformed(format!("{name}: bad header")));
    }
    let count: usize = shape.iter().product();
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            name: name.into(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}
