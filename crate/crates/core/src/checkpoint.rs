//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"MRCK"
//! version u32
//! kind    u8
//! ndims   u32, then ndims × u64     structural dimensions
//! nscal   u32, then nscal × f64     scalar hyperparameters
//! nblock  u32, then per block:
//!         rank u8, rank × u64 shape, row-major f64 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Mamba = 0,
    T5 = 1,
    Router = 2,
    Embedding = 3,
}

impl CheckpointKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Mamba,
            1 => Self::T5,
            2 => Self::Router,
            3 => Self::Embedding,
            other => return Err(Error::Checkpoint(format!("unknown kind byte {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub dims: Vec<u64>,
    pub scalars: Vec<f64>,
    pub blocks: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, dims: Vec<u64>, scalars: Vec<f64>) -> Self {
        Self { kind, dims, scalars, blocks: Vec::new() }
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn dim(&self, i: usize) -> Result<usize> {
        self.dims
            .get(i)
            .map(|&d| d as usize)
            .ok_or_else(|| Error::Checkpoint(format!("missing dimension {i}")))
    }

    pub fn scalar(&self, i: usize) -> Result<f64> {
        self.scalars.get(i).copied().ok_or_else(|| Error::Checkpoint(format!("missing scalar {i}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for s in &self.scalars {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for t in &self.blocks {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_byte(r.take(1)?[0])?;
        let dims = (0..r.u32()?).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let scalars = (0..r.u32()?).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let nblocks = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..nblocks {
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > (bytes.len() - r.pos) / 8 {
                return Err(Error::Checkpoint("block runs past end of file".into()));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            blocks.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, dims, scalars, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies stored blocks over `targets` in order, checking shapes.
    pub fn fill<'a>(&self, targets: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut blocks = self.blocks.iter();
        for t in targets {
            let b = blocks.next().ok_or_else(|| Error::Checkpoint("too few parameter blocks".into()))?;
            if b.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("block shape {:?} does not match {:?}", b.shape(), t.shape())));
            }
            t.data_mut().copy_from_slice(b.data());
        }
        if blocks.next().is_some() {
            return Err(Error::Checkpoint("too many parameter blocks".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let mut c = Checkpoint::new(CheckpointKind::Router, vec![3, 4], vec![0.5]);
        c.blocks.push(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        for cut in [0, 3, 9, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
