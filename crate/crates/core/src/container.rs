//! Binary tensor container shared by checkpoints and dataset exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "STCA"
//! version    u16
//! count      u32
//! count × {
//!   name_len u16, name (UTF-8), rank u8, extents u32 × rank,
//!   values   f32 × product(extents)
//! }
//! step       u64
//! epoch      u64
//! rng_len    u16, rng state bytes
//! digest     32 bytes
//! ```
//!
//! Values are stored as 32-bit floats; [`quantize`] gives the value a
//! 64-bit tensor entry takes after one store/load cycle.

use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STCA";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at offset {0} is not UTF-8")]
    InvalidName(usize),
    #[error("tensor {name:?} has a zero or oversized extent {shape:?}")]
    InvalidShape { name: String, shape: Vec<usize> },
    #[error("{0} trailing bytes after digest")]
    TrailingBytes(usize),
    #[error("tensor name longer than 65535 bytes")]
    NameTooLong,
    #[error("rng state longer than 65535 bytes")]
    RngTooLong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(name: impl Into<String>, shape: &[usize], data: &[f64]) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
    pub epoch: u64,
    pub rng_state: Vec<u8>,
    pub config_digest: [u8; 32],
}

/// The value an `f64` takes after a round trip through 32-bit storage.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Container {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Container {
            tensors,
            step: 0,
            epoch: 0,
            rng_state: Vec::new(),
            config_digest: [0; 32],
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong)?;
            let bad_shape = || FormatError::InvalidShape {
                name: t.name.clone(),
                shape: t.shape.clone(),
            };
            if t.shape.len() > u8::MAX as usize
                || t.shape.iter().any(|&d| d == 0 || d > u32::MAX as usize)
                || t.shape.iter().product::<usize>() != t.data.len()
            {
                return Err(bad_shape());
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let rng_len = u16::try_from(self.rng_state.len()).map_err(|_| FormatError::RngTooLong)?;
        out.extend_from_slice(&rng_len.to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        out.extend_from_slice(&self.config_digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::InvalidName(name_at))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) });
            let numel = match numel {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => n,
                Some(n) if n.checked_mul(4).is_some() => {
                    return Err(FormatError::Truncated {
                        offset: r.pos,
                        needed: n * 4,
                    })
                }
                _ => return Err(FormatError::InvalidShape { name, shape }),
            };
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let rng_len = r.u16()? as usize;
        let rng_state = r.take(rng_len)?.to_vec();
        let config_digest = r.array()?;
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        Ok(Container {
            tensors,
            step,
            epoch,
            rng_state,
            config_digest,
        })
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::decode(&bytes)?)
    }
}
