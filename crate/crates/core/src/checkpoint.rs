//! Binary parameter checkpoints.
//!
//! Layout, little-endian: magic (4 bytes), format version u32, parameter
//! count u32, then per parameter in name order: name length u32, UTF-8 name,
//! rank u32, dims u32 each, f32 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const VERSION: u32 = 1;
pub const GENERATOR_MAGIC: [u8; 4] = *b"XIS2";
pub const DISCRIMINATOR_MAGIC: [u8; 4] = *b"XID2";

pub type Entries = Vec<(String, Tensor<f32>)>;

pub fn encode<R: Real>(magic: [u8; 4], store: &ParamStore<R>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_elements() * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.sorted() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Entries> {
    let mut r = Reader { bytes };
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.bytes.len()))
            .ok_or_else(|| Error::Format(format!("parameter {name} is truncated")))?;
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.bytes.len())));
    }
    Ok(entries)
}

pub fn save<R: Real>(path: impl AsRef<Path>, magic: [u8; 4], store: &ParamStore<R>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(magic, store)).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Entries> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

/// Overwrite every parameter of `store` from `entries`. The name sets and
/// shapes must match exactly.
pub fn restore<R: Real>(store: &mut ParamStore<R>, entries: &Entries) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} does not exist in the model")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.cast();
    }
    Ok(())
}

pub fn load<R: Real>(path: impl AsRef<Path>, magic: [u8; 4], store: &mut ParamStore<R>) -> Result<()> {
    restore(store, &load_entries(path, magic)?)
}
