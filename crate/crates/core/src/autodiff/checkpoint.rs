//! Weight checkpoints.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes   "SBIRCKPT"
//! version   u32       1
//! count     u32       number of arrays
//! repeated `count` times, in parameter registration order:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   ndim     u32
//!   dims     ndim × u64
//!   data     prod(dims) × f64
//! ```
//!
//! A text manifest is written next to the checkpoint (`<file>.names`), one
//! line per array: `name<TAB>d0xd1x...` (`scalar` for rank 0).

use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SBIRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn manifest(store: &ParamStore) -> String {
    let mut s = String::new();
    for (_, p) in store.iter() {
        let dims = if p.shape.is_empty() {
            "scalar".to_string()
        } else {
            p.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
        };
        s.push_str(&format!("{}\t{}\n", p.name, dims));
    }
    s
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse("checkpoint", "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::parse("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::parse("checkpoint", e.to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

/// Writes the checkpoint and its name manifest.
pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))?;
    let names = manifest_path(path);
    fs::write(&names, manifest(store)).map_err(|e| Error::io(names, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrites `store` with checkpoint arrays; names and shapes must agree
/// exactly with the store's registration.
pub fn restore(store: &mut ParamStore, arrays: Vec<NamedArray>) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::parse(
            "checkpoint",
            format!("{} arrays, model expects {}", arrays.len(), store.len()),
        ));
    }
    for a in arrays {
        let id = store.find(&a.name).ok_or_else(|| Error::UnknownParam(a.name.clone()))?;
        if store.get(id).shape != a.shape {
            return Err(Error::shape("checkpoint", &store.get(id).shape, &a.shape));
        }
        store.set(id, a.data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut store = ParamStore::new();
        store.add("a.w", &[2, 3], vec![0.1, -2.5, 3.0, f64::MIN_POSITIVE, 1e300, -0.0]);
        store.add("b", &[], vec![7.0]);
        let arrays = decode(&encode(&store)).unwrap();
        assert_eq!(arrays[0].shape, vec![2, 3]);
        assert_eq!(arrays[0].data[3].to_bits(), f64::MIN_POSITIVE.to_bits());
        assert_eq!(arrays[1].shape, Vec::<usize>::new());
        let mut other = store.clone();
        other.set(other.find("b").unwrap(), vec![0.0]).unwrap();
        restore(&mut other, arrays).unwrap();
        assert_eq!(other.value(other.find("b").unwrap()), &[7.0]);
        assert_eq!(manifest(&store), "a.w\t2x3\nb\tscalar\n");
    }

    #[test]
    fn byte_layout_header() {
        let mut store = ParamStore::new();
        store.add("x", &[1], vec![1.0]);
        let bytes = encode(&store);
        assert_eq!(&bytes[..8], b"SBIRCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", &[4], vec![1.0; 4]);
        let bytes = encode(&store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
