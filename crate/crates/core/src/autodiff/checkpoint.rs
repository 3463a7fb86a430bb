//! Named-tensor container.
//!
//! ```text
//! "SICKPT" u8 version  u32 count
//! per tensor: u32 name_len, name (utf-8), u8 dtype, u32 ndim, u64 dims[ndim],
//!             u64 byte_len, raw little-endian bytes, u32 crc32(raw)
//! ```
//! All integers are little-endian. dtype 1 is f64; it is the only one written.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"SICKPT";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut buf = Vec::with_capacity(16 + store.n_values() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let raw: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        buf.extend_from_slice(&(raw.len() as u64).to_le_bytes());
        buf.extend_from_slice(&raw);
        buf.extend_from_slice(&crc32fast::hash(&raw).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(6)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let nbytes = c.u64()? as usize;
        let raw = c.take(nbytes)?;
        let crc = c.u32()?;
        if crc32fast::hash(raw) != crc {
            return Err(Error::Format(format!("{name}: checksum mismatch")));
        }
        if !nbytes.is_multiple_of(8) {
            return Err(Error::Format(format!(
                "{name}: {nbytes} bytes is not whole f64s"
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|_| Error::Format(format!("{name}: shape does not match data")))?;
        store.add(name, t)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(store, std::io::BufWriter::new(f))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(f))
}
