//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCNN" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 ndim | u64 dims[ndim] | f64 data
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn error(&self, message: String) -> Error {
        Error::Format {
            offset: self.pos,
            message,
        }
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Data(format!("reading checkpoint: {e}")))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        c.pos = 0;
        return Err(c.error("bad magic, expected \"DCNN\"".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        c.pos -= 4;
        return Err(c.error(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::Format {
            offset: start,
            message: "tensor name is not UTF-8".into(),
        })?;
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = c.u64("dimension")?;
            let d = usize::try_from(d).map_err(|_| c.error(format!("dimension {d} too large")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| c.error("tensor size overflows".into()))?;
            shape.push(d);
        }
        let nbytes = numel
            .checked_mul(8)
            .ok_or_else(|| c.error("tensor size overflows".into()))?;
        let raw = c.take(nbytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| c.error(e.to_string()))?;
        tensors.push((name.to_string(), t));
    }
    if c.pos != bytes.len() {
        return Err(c.error(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(tensors)
}
