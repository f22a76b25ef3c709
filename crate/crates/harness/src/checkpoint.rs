//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `SFCK`, `u32` version, `u32` parameter
//! count, then per parameter `u16` name length, UTF-8 name, `u8` rank, `u32`
//! extents and `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use sft_core::numerics::{ParamStore, Tensor};

use crate::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
}

fn format_err<T>(m: impl Into<String>) -> Result<T> {
    Err(HarnessError::Checkpoint(m.into()))
}

fn io(e: std::io::Error) -> HarnessError {
    HarnessError::Checkpoint(e.to_string())
}

pub fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let Ok(len) = u16::try_from(name.len()) else {
            return format_err(format!("parameter name too long: {}", p.name));
        };
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.value.shape();
        buf.push(shape.len() as u8);
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return format_err("truncated checkpoint");
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<Entry>> {
    let mut all = Vec::new();
    r.read_to_end(&mut all).map_err(io)?;
    let mut b = all.as_slice();
    if take(&mut b, 4)? != MAGIC {
        return format_err("bad magic");
    }
    let version = u32_at(&mut b)?;
    if version != VERSION {
        return format_err(format!("unsupported version {version}"));
    }
    let count = u32_at(&mut b)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut b, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut b, len)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = take(&mut b, 1)?[0] as usize;
        let shape = (0..rank).map(|_| u32_at(&mut b).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = take(&mut b, n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Entry { name, value: Tensor::new(shape, data)? });
    }
    if !b.is_empty() {
        return format_err(format!("{} trailing bytes", b.len()));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `entries`, which must match it
/// name for name and shape for shape.
pub fn restore(store: &mut ParamStore, entries: Vec<Entry>) -> Result<()> {
    if entries.len() != store.len() {
        return format_err(format!("{} entries for a model with {} parameters", entries.len(), store.len()));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, e) in ids.into_iter().zip(entries) {
        let p = store.get(id);
        if p.name != e.name || p.value.shape() != e.value.shape() {
            return format_err(format!(
                "entry {} {:?} does not match parameter {} {:?}",
                e.name,
                e.value.shape(),
                p.name,
                p.value.shape()
            ));
        }
        store.set_value(id, e.value)?;
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_store(&mut buf, store)?;
    std::fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
}

pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    restore(store, read_entries(&mut bytes.as_slice())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_fn(&[2, 3], |ix| ix[0] as f64 - 0.1 * ix[1] as f64));
        s.add("b", Tensor::scalar(f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        write_store(&mut buf, &store()).unwrap();
        assert_eq!(&buf[..4], b"SFCK");
        assert_eq!(&buf[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..15], &[1, 0, b'w']);
        assert_eq!(buf[15], 2);
        assert_eq!(buf.len(), 12 + (3 + 1 + 8 + 48) + (3 + 1 + 4 + 8));
    }

    #[test]
    fn round_trip_and_mismatch() {
        let src = store();
        let mut buf = Vec::new();
        write_store(&mut buf, &src).unwrap();
        let mut dst = ParamStore::new();
        dst.add("w", Tensor::zeros(&[2, 3]));
        dst.add("b", Tensor::zeros(&[1]));
        restore(&mut dst, read_entries(&mut buf.as_slice()).unwrap()).unwrap();
        for (a, b) in src.iter().zip(dst.iter()) {
            assert_eq!(a.1.value, b.1.value);
        }
        let mut wrong = ParamStore::new();
        wrong.add("w", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::zeros(&[1]));
        assert!(restore(&mut wrong, read_entries(&mut buf.as_slice()).unwrap()).is_err());
        assert!(read_entries(&mut &buf[..buf.len() - 1]).is_err());
        assert!(read_entries(&mut &b"XXXX"[..]).is_err());
    }
}
