//! `STK1` tensor checkpoints.
//!
//! Layout (little-endian): magic `STK1`, u32 version, u32 record count, then
//! per record: u32 name length, UTF-8 name, u32 ndim, u64 dims, f32 data.

use std::path::Path;

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Result, StatError};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"STK1";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(StatError::Checkpoint(format!("duplicate record `{name}`")));
        }
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn push_params(&mut self, params: &[Parameter]) -> Result<()> {
        for p in params {
            self.push(p.name.clone(), p.tensor.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| StatError::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    /// Records whose names start with `prefix`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<Parameter> {
        self.records
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix).map(|name| Parameter {
                    name: name.to_string(),
                    tensor: t.clone(),
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(StatError::Checkpoint("bad magic, not an STK1 file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(StatError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| StatError::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.truncated())?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.truncated())?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.push(name, Tensor::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(StatError::Checkpoint(format!(
                "{} trailing bytes after last record",
                r.remaining()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| StatError::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| StatError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn truncated(&self) -> StatError {
        StatError::Checkpoint(format!("truncated or corrupt at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.truncated());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Splits a `u64` into four exactly representable f32 halves-of-halves.
pub fn u64_to_record(v: u64) -> Tensor {
    let parts = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::from_vec(parts)
}

pub fn u64_from_record(t: &Tensor) -> Result<u64> {
    let d = t.data();
    if d.len() != 4
        || d.iter()
            .any(|v| v.fract() != 0.0 || !(0.0..65536.0).contains(v))
    {
        return Err(StatError::Checkpoint("malformed integer record".into()));
    }
    Ok(d.iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))))
}
