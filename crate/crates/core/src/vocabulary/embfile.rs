//! `SENSEEMB1` embedding matrices.
//!
//! Layout: 9-byte ASCII magic, `u32` LE row count, `u32` LE dim, then
//! `rows × dim` little-endian IEEE-754 `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMB_MAGIC: &[u8; 9] = b"SENSEEMB1";

/// Embedding width of the shared text/vision space.
pub const EMBED_DIM: usize = 512;

pub fn encode_embeddings(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + m.as_slice().len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an embedding file. When `expected_dim` is set, any other width
/// is rejected before the payload is read.
pub fn decode_embeddings(bytes: &[u8], expected_dim: Option<usize>) -> Result<Matrix<f32>> {
    if bytes.len() < EMB_MAGIC.len() || &bytes[..EMB_MAGIC.len()] != EMB_MAGIC {
        return Err(Error::BadMagic {
            expected: "SENSEEMB1",
        });
    }
    let header = bytes.get(9..17).ok_or_else(|| Error::Truncated {
        what: "embedding header".into(),
    })?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::EmbeddingDim {
                expected,
                found: dim,
            });
        }
    }
    let payload = &bytes[17..];
    let needed = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Data("embedding header overflows".into()))?;
    if payload.len() < needed {
        return Err(Error::Truncated {
            what: format!("embedding payload ({} of {needed} bytes)", payload.len()),
        });
    }
    if payload.len() > needed {
        return Err(Error::Data(format!(
            "{} trailing bytes after embedding payload",
            payload.len() - needed
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("embedding row {}", index / dim.max(1)),
            index,
        });
    }
    Matrix::new(rows, dim, data)
}

pub fn write_embeddings(path: &Path, m: &Matrix<f32>) -> Result<()> {
    fs::write(path, encode_embeddings(m)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, expected_dim)
}
