//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "AFCK"
//! version u8       1
//! u32              config text length L
//! L bytes          config echo (key=value lines, UTF-8)
//! u32              parameter count P
//! P times:
//!   u32            name length N
//!   N bytes        name (UTF-8)
//!   u32            rank R
//!   R × u64        dims
//!   Π dims × f64   values, row-major
//! ```

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(out: &mut W, config_text: &str, store: &ParamStore) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&(config_text.len() as u32).to_le_bytes())?;
    out.write_all(config_text.as_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated checkpoint: {what} needs {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.fail(format!("{what} {v} does not fit in memory")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

/// Parses a checkpoint into its config echo and named tensors, in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let version = r.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        r.pos -= 1;
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")?;
    let config = r.string(len, "config text")?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = r.string(len, "parameter name")?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| r.fail(format!("parameter {name:?} has absurd dims {dims:?}")))?;
        let raw = r.take(numel * 8, "parameter data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::new(&dims, data).map_err(|e| r.fail(e.to_string()))?;
        params.push((name, value));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after the last parameter", bytes.len() - r.pos)));
    }
    Ok((config, params))
}
