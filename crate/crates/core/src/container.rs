//! Binary container of named arrays.
//!
//! Layout (little-endian): 4-byte magic, `u32` version, `u32` metadata length
//! and UTF-8 metadata, `u32` array count, then per array a `u16` name length,
//! the name, `u32` rank, `u64` dims and the values as `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Array;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: String,
    pub arrays: Vec<(String, Array)>,
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container { meta: meta.into(), arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, a: Array) {
        self.arrays.push((name.into(), a));
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, magic: &[u8; 4]) -> Result<()> {
        w.write_all(magic)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&len_u32(self.meta.len())?.to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&len_u32(self.arrays.len())?.to_le_bytes())?;
        for (name, a) in &self.arrays {
            let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            w.write_all(&n.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&len_u32(a.shape().len())?.to_le_bytes())?;
            for &d in a.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(a.len() * 4);
            for &v in a.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m)?;
        if &m != magic {
            return Err(Error::Format(format!("bad magic {m:?}, expected {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let meta = String::from_utf8(read_bytes(r, meta_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut nb = [0u8; 2];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(read_bytes(r, u16::from_le_bytes(nb) as usize)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|e| Error::Format(e.to_string()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
            let raw = read_bytes(r, n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let a = Array::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            arrays.push((name, a));
        }
        Ok(Container { meta, arrays })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("truncated: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut c = Container::new("{\"a\":1}");
        c.push("x", Array::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-3, 7.0]).unwrap());
        c.push("empty", Array::zeros(&[0, 4]));
        let mut buf = Vec::new();
        c.write_to(&mut buf, b"TEST").unwrap();
        let back = Container::read_from(&mut buf.as_slice(), b"TEST").unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.get("x").unwrap().shape(), &[2, 3]);
        assert!(back.get("x").unwrap().max_abs_diff(c.get("x").unwrap()) < 1e-7);
        assert_eq!(back.get("empty").unwrap().shape(), &[0, 4]);
        assert!(back.get("nope").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let c = Container::new("");
        let mut buf = Vec::new();
        c.write_to(&mut buf, b"TEST").unwrap();
        assert!(matches!(Container::read_from(&mut buf.as_slice(), b"OTHR"), Err(Error::Format(_))));
        buf[4] = 9;
        assert!(matches!(Container::read_from(&mut buf.as_slice(), b"TEST"), Err(Error::Format(_))));

        let mut c = Container::new("m");
        c.push("x", Array::filled(&[4], 1.0));
        let mut buf = Vec::new();
        c.write_to(&mut buf, b"TEST").unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Container::read_from(&mut buf.as_slice(), b"TEST").is_err());
    }
}
