//! Little-endian binary containers for checkpoints and latent sets.
//!
//! Both start with the magic `DSDF` and a `u32` version.
//!
//! Checkpoint: phase tag (`u32` length + UTF-8), step (`u64`), config snapshot
//! (`u64` length + JSON text), tensor count (`u32`), then per tensor: name
//! (`u32` length + UTF-8), rank (`u32`), dims (`u64` each), `f64` payload.
//! Tensors are written in name order, so saving a loaded checkpoint
//! reproduces the original bytes.
//!
//! Latents: count (`u64`), dimension (`u64`), then `count × dimension` `f64`
//! values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dsdf_tensor::Tensor;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"DSDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    pub step: u64,
    /// JSON snapshot of the configuration the tensors were produced with.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Format {
            what: self.what,
            detail: format!("{} (at byte {})", detail.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.err(format!("implausible length {n}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.err(e.to_string()))
    }

    fn header(&mut self) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(self.err("missing DSDF magic"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        header(&mut out);
        put_str32(&mut out, &self.phase);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str32(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "checkpoint",
        };
        r.header()?;
        let n = r.u32()? as u64;
        let len = r.len(n)?;
        let phase = r.string(len)?;
        let step = r.u64()?;
        let n = r.u64()?;
        let len = r.len(n)?;
        let config = r.string(len)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as u64;
            let len = r.len(n)?;
            let name = r.string(len)?;
            let rank = r.u32()? as u64;
            let rank = r.len(rank)?;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64()?;
                dims.push(r.len(d)?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err("tensor size overflow"))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(dims, data).map_err(|e| r.err(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.err(format!("duplicate tensor `{name}`")));
            }
        }
        r.finish()?;
        Ok(Self {
            phase,
            step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_bytes(path.as_ref())?)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

/// Row-major set of latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentSet {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(CoreError::Format {
                what: "latent set",
                detail: format!("{} values do not split into rows of {dim}", values.len()),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.values.clone()).expect("latents are finite")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        header(&mut out);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        put_f64s(&mut out, &self.values);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "latent set",
        };
        r.header()?;
        let count = r.u64()?;
        let count = r.len(count)?;
        let dim = r.u64()?;
        let dim = r.len(dim)?;
        let n = count.checked_mul(dim).ok_or_else(|| r.err("size overflow"))?;
        let values = r.f64s(n)?;
        r.finish()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.err("non-finite latent"));
        }
        Self::new(dim, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_bytes(path.as_ref())?)
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.1, 1e-300, -0.0]).unwrap());
        tensors.insert("a".into(), Tensor::scalar(7.0).unwrap());
        Checkpoint {
            phase: "modulation".into(),
            step: 42,
            config: "{\"seed\":1}".into(),
            tensors,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"DSDF");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn latent_roundtrip() {
        let l = LatentSet::new(2, vec![0.5, -1.0, 3.25, 1e-3]).unwrap();
        let bytes = l.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8 + 4 * 8);
        assert_eq!(LatentSet::from_bytes(&bytes).unwrap(), l);
        assert_eq!(l.row(1), &[3.25, 1e-3]);
        assert!(LatentSet::new(3, vec![0.0; 4]).is_err());
    }
}
