//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "globe-ckpt v1\n"
//! u64 entry count
//! per entry:
//!   u32 path length, path bytes (UTF-8)
//!   u8  dtype (0 = f64, 1 = UTF-8 text)
//!   u32 ndim, ndim x u64 dims
//!   payload: product(dims) IEEE-754 f64 values, or dims[0] text bytes
//! ```
//!
//! The model configuration travels as the text entry `__config__`.

use std::path::Path;

use ndarray::Array2;

use super::params::ParameterStore;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"globe-ckpt v1\n";
pub const CONFIG_ENTRY: &str = "__config__";

pub fn to_bytes(store: &ParameterStore, config: &str) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((store.len() as u64 + 1).to_le_bytes());
    let put_path = |out: &mut Vec<u8>, p: &str| {
        out.extend((p.len() as u32).to_le_bytes());
        out.extend(p.as_bytes());
    };
    put_path(&mut out, CONFIG_ENTRY);
    out.push(1);
    out.extend(1u32.to_le_bytes());
    out.extend((config.len() as u64).to_le_bytes());
    out.extend(config.as_bytes());
    for (_, name, value) in store.iter() {
        put_path(&mut out, name);
        out.push(0);
        out.extend(2u32.to_le_bytes());
        out.extend((value.nrows() as u64).to_le_bytes());
        out.extend((value.ncols() as u64).to_le_bytes());
        for v in value.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("checkpoint truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse { line: 0, msg: msg.into() }
}

/// Parses a checkpoint into its parameter store and embedded configuration.
pub fn from_bytes(buf: &[u8]) -> Result<(ParameterStore, String)> {
    if !buf.starts_with(MAGIC) {
        return Err(bad("not a globe-ckpt v1 file"));
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let count = r.u64()?;
    let mut store = ParameterStore::new();
    let mut config = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("entry path is not UTF-8"))?
            .to_owned();
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        match dtype {
            0 => {
                let (rows, cols) = match dims[..] {
                    [n] => (1, n),
                    [a, b] => (a, b),
                    _ => return Err(bad(format!("{path}: unsupported rank {ndim}"))),
                };
                let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
                let bytes = r.take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
                let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                if store.id(&path).is_some() {
                    return Err(bad(format!("duplicate entry {path}")));
                }
                store.add(path, Array2::from_shape_vec((rows, cols), data).unwrap());
            }
            1 => {
                let [n] = dims[..] else {
                    return Err(bad(format!("{path}: text entry must be rank 1")));
                };
                let text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("text entry is not UTF-8"))?;
                if path == CONFIG_ENTRY {
                    config = Some(text.to_owned());
                }
            }
            d => return Err(bad(format!("{path}: unknown dtype {d}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok((store, config.unwrap_or_default()))
}

pub fn save(path: &Path, store: &ParameterStore, config: &str) -> Result<()> {
    std::fs::write(path, to_bytes(store, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParameterStore, String)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
