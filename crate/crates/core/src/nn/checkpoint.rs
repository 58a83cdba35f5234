//! Binary container shared by network checkpoints and code statistics.
//!
//! Layout (all integers little-endian):
//!
//! | field          | encoding                                   |
//! |----------------|--------------------------------------------|
//! | magic          | `DGNAM\0`                                  |
//! | version        | u16                                        |
//! | text           | u32 byte length, UTF-8                     |
//! | tensor count   | u32                                        |
//! | per tensor     | u32 name length, UTF-8 name, u8 ndim,      |
//! |                | ndim × u32 dims, `f32` data                |

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 6] = b"DGNAM\0";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Parse { offset: 0, detail: "bad magic, not a DGNAM container".into() });
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Parse { offset: 6, detail: format!("unsupported version {version}") });
        }
        let text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let at = r.pos;
            let n = numel(&dims);
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.error("tensor size overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Parse { offset: at, detail: e.to_string() })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after last tensor"));
        }
        Ok(Container { text, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| Error::lookup("tensor", name))
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
    fn error(&self, detail: &str) -> Error {
        Error::Parse { offset: self.pos, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse { offset: at, detail: "invalid UTF-8".into() })
    }
}
