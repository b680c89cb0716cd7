//! Binary tensor files.
//!
//! ```text
//! "EMBR" | version u16 | dtype u8 (1 = f64) | ndim u8 | dims u32 * ndim |
//! payload f64 * prod(dims) | crc32(payload) u32
//! ```
//!
//! All integers and floats are little-endian; the payload is row-major.

use std::path::Path;

use ember_core::tensor::Tensor;

use crate::error::{self, PipelineError, Result};

pub const MAGIC: &[u8; 4] = b"EMBR";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 8 * tensor.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a container; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: String| PipelineError::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not a tensor container (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(bad(format!("unsupported dtype tag {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    let header = 8 + 4 * ndim;
    if bytes.len() < header + 4 {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let payload_len = count.and_then(|c| c.checked_mul(8));
    let Some(payload_len) = payload_len.filter(|&n| bytes.len() == header + n + 4) else {
        return Err(bad(format!(
            "payload for dims {shape:?} does not match file length {}",
            bytes.len()
        )));
    };
    let payload = &bytes[header..header + payload_len];
    let stored = u32::from_le_bytes(bytes[header + payload_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    error::write(path, encode(tensor))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(error::io_err(path))?;
    decode(&bytes, path)
}
