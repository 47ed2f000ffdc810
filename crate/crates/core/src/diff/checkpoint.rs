//! Binary parameter checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MTCVRCKP"
//! version  u32
//! meta_len u32, meta bytes (UTF-8, free-form; JSON in practice)
//! count    u32
//! repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   values   f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParameterStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTCVRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large ({n})")))
}

pub fn write_checkpoint(path: &Path, store: &ParameterStore, metadata: &str) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + store.total_elements() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION)?;
    put_u32(&mut buf, len_u32(metadata.len(), "metadata")?)?;
    buf.extend_from_slice(metadata.as_bytes());
    put_u32(&mut buf, len_u32(store.len(), "parameter count")?)?;
    for id in store.ids() {
        let name = store.name(id);
        put_u32(&mut buf, len_u32(name.len(), "name")?)?;
        buf.extend_from_slice(name.as_bytes());
        let value = store.value(id);
        put_u32(&mut buf, len_u32(value.shape().len(), "rank")?)?;
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Returns the restored store (same names, order and values) and the metadata.
pub fn read_checkpoint(path: &Path) -> Result<(ParameterStore, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((store, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParameterStore::new();
        s.add("emb", Tensor::matrix(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap()).unwrap();
        s.add("bias", Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &s, "{\"k\":1}").unwrap();
        let (back, meta) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back.len(), 2);
        for (a, b) in s.values().iter().zip(back.values()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.name(back.id("bias").unwrap()), "bias");
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut s = ParameterStore::new();
        s.add("x", Tensor::scalar(1.0)).unwrap();
        write_checkpoint(&path, &s, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
