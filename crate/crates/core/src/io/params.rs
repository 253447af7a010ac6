use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"MOREPK1\n";

/// Named flat f64 sections, serialized as: magic, u64 section count, then
/// per section a u64-length-prefixed UTF-8 name, u64 element count and the
/// values, all little-endian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamFile {
    pub sections: Vec<(String, Vec<f64>)>,
}

impl ParamFile {
    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.sections.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter section {name:?} not found")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for (name, values) in &self.sections {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("parameter file: {m}"));
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated magic"))? != PARAM_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = cur.u64().ok_or_else(|| bad("truncated section count"))?;
        let mut sections = Vec::new();
        for _ in 0..n {
            let len = cur.u64().ok_or_else(|| bad("truncated name length"))? as usize;
            let name = cur.take(len).ok_or_else(|| bad("truncated name"))?;
            let name = std::str::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let count = cur.u64().ok_or_else(|| bad("truncated element count"))? as usize;
            let raw = cur
                .take(count.checked_mul(8).ok_or_else(|| bad("element count overflow"))?)
                .ok_or_else(|| bad("truncated values"))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            sections.push((name, values));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
