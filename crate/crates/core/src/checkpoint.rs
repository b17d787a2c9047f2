//! Binary container for named parameter arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CLEXCKPT"
//! version  u32
//! count    u32
//! count × entry:
//!   name_len u16, name (utf-8)
//!   precision u8 (0 = f32, 1 = f64)
//!   ndim u8, dims u64 × ndim
//!   data: product(dims) little-endian floats
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::real::{Precision, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLEXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unknown precision tag {0}")]
    Precision(u8),
    #[error("entry name is not utf-8")]
    Name,
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
}

/// Header information for one stored array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
}

pub fn encode<T: Real>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match T::PRECISION {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le_bytes_into(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes every entry, converting stored values to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    decode_with_info(bytes).map(|v| v.into_iter().map(|(info, t)| (info.name, t)).collect())
}

pub fn decode_with_info<T: Real>(bytes: &[u8]) -> Result<Vec<(EntryInfo, Tensor<T>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(EntryInfo, Tensor<T>)> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Name)?
            .into();
        let precision = match r.u8()? {
            0 => Precision::F32,
            1 => Precision::F64,
            other => return Err(CheckpointError::Precision(other)),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let width = precision.byte_width();
        let raw = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => T::of(f32::from_le_slice(c) as f64),
                Precision::F64 => T::of(f64::from_le_slice(c)),
            })
            .collect();
        if out.iter().any(|(i, _)| i.name == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::Truncated)?;
        out.push((
            EntryInfo {
                name,
                shape,
                precision,
            },
            tensor,
        ));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    Ok(out)
}
