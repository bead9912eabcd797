use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NCLFSNAP";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const FLAG_TRAINABLE: u8 = 1;
const FLAG_DECAY: u8 = 2;

/// Flat little-endian encoding: magic, version, tensor count, then per
/// tensor its name, dtype, shape, flags and values.
pub fn encode_snapshot(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flags = (p.trainable as u8 * FLAG_TRAINABLE) | (p.decay as u8 * FLAG_DECAY);
        out.push(flags);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                file: self.file.clone(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.clone(),
            message: message.into(),
        }
    }
}

pub fn decode_snapshot(bytes: &[u8], origin: &str) -> Result<ParamStore> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        file: origin.to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a parameter snapshot"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported snapshot version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("parameter name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(r.fail(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let flags = r.u8()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("shape overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.index_of(&name).is_some() {
            return Err(r.fail(format!("duplicate parameter {name}")));
        }
        let idx = store.insert(name, Tensor::from_vec(&shape, data)?, flags & FLAG_DECAY != 0);
        store.by_index_mut(idx).trainable = flags & FLAG_TRAINABLE != 0;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn write_snapshot(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_snapshot(store)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes, &path.display().to_string())
}

/// One line per tensor in store order: name, dtype, shape, trainable flag.
pub fn snapshot_manifest(store: &ParamStore) -> String {
    let mut out = String::new();
    for p in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{}\tf64\t{}\t{}\n",
            p.name,
            shape.join("x"),
            if p.trainable { "trainable" } else { "frozen" }
        ));
    }
    out
}
