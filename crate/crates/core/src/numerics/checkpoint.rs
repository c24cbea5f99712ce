//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"QAGENCKP"
//! u32    format version
//! u32    metadata entry count, then (string key, string value) pairs
//! u32    tensor count, then per tensor:
//!        string name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8 bytes. Floats are stored
//! as raw IEEE-754 bits, so a write/read cycle is bit exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"QAGENCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse("checkpoint", format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            ck.tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::parse("checkpoint", "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::parse("checkpoint", e.to_string()))
    }
}
