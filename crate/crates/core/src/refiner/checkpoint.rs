//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): ASCII magic `SENSECKPT1`, `u32`
//! format version, `u64` init seed, `u8` loss tag, then each parameter block
//! in storage order as `u32` length followed by that many `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RefinerParams, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const CKPT_MAGIC: &[u8; 10] = b"SENSECKPT1";
pub const CKPT_VERSION: u32 = 1;

/// Which objective produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTag {
    None = 0,
    Bce = 1,
    Contrastive = 2,
    Focal = 3,
}

impl LossTag {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => LossTag::None,
            1 => LossTag::Bce,
            2 => LossTag::Contrastive,
            3 => LossTag::Focal,
            other => return Err(Error::Data(format!("unknown loss tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: RefinerParams<f32>,
    pub seed: u64,
    pub loss: LossTag,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + ckpt.params.param_count() * 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.push(ckpt.loss as u8);
    for block in ckpt.params.blocks() {
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated {
                what: what.to_string(),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: "SENSECKPT1",
        });
    }
    let mut r = Reader {
        bytes,
        pos: CKPT_MAGIC.len(),
    };
    let version = r.u32("format version")?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().unwrap());
    let loss = LossTag::from_u8(r.take(1, "loss tag")?[0])?;

    let mut blocks: Vec<Vec<f32>> = Vec::with_capacity(BLOCK_NAMES.len());
    for name in BLOCK_NAMES {
        let len = r.u32(&format!("{name} length"))? as usize;
        let raw = r.take(len.saturating_mul(4), name)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("checkpoint block {name}"),
                index,
            });
        }
        blocks.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }

    let hidden = blocks[1].len();
    let latent = blocks[5].len();
    if hidden == 0 || latent == 0 || !blocks[0].len().is_multiple_of(hidden) {
        return Err(Error::Data("inconsistent checkpoint block sizes".into()));
    }
    let input = blocks[0].len() / hidden;
    let consistent = blocks[2].len() == hidden
        && blocks[3].len() == hidden
        && blocks[4].len() == latent * hidden
        && blocks[6].len() == 1;
    if !consistent {
        return Err(Error::Data("inconsistent checkpoint block sizes".into()));
    }
    let scale = blocks[6][0];
    if scale <= 0.0 {
        return Err(Error::Data(format!("sigmoid scale {scale} is not positive")));
    }
    let mut it = blocks.into_iter();
    let params = RefinerParams {
        w1: Matrix::new(hidden, input, it.next().unwrap())?,
        b1: Vector::new(it.next().unwrap()),
        ln_gamma: Vector::new(it.next().unwrap()),
        ln_beta: Vector::new(it.next().unwrap()),
        w2: Matrix::new(latent, hidden, it.next().unwrap())?,
        b2: Vector::new(it.next().unwrap()),
        sigmoid_scale: scale,
    };
    Ok(Checkpoint { params, seed, loss })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::RefinerShape;

    fn tiny() -> Checkpoint {
        Checkpoint {
            params: RefinerParams::init(
                RefinerShape {
                    input: 4,
                    hidden: 8,
                    latent: 4,
                },
                77,
            ),
            seed: 77,
            loss: LossTag::Focal,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
        let bits = |p: &RefinerParams<f32>| -> Vec<u32> {
            p.blocks().iter().flat_map(|b| b.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back.params), bits(&c.params));
    }

    #[test]
    fn header_bytes() {
        let bytes = encode_checkpoint(&tiny());
        assert_eq!(&bytes[..10], b"SENSECKPT1");
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..22], &77u64.to_le_bytes());
        assert_eq!(bytes[22], 3);
        assert_eq!(&bytes[23..27], &32u32.to_le_bytes());
        assert_eq!(bytes.len(), 23 + 7 * 4 + 93 * 4);
    }

    #[test]
    fn truncation_version_and_nan_errors() {
        let bytes = encode_checkpoint(&tiny());
        for cut in [5, 12, 20, 30, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Truncated { .. } | Error::BadMagic { .. }),
                "cut {cut}: {err:?}"
            );
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));

        let mut v2 = bytes.clone();
        v2[10..14].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let mut nan = bytes.clone();
        nan[27..31].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_checkpoint(&nan), Err(Error::NonFinite { .. })));
    }
}
