//! AOTB binary tensor container.
//!
//! Single record layout (all integers little-endian):
//!
//! ```text
//! b"AOTB" | u8 version = 1 | u8 dtype (1 = f64, 2 = f32) | u8 rank | u64 dims[rank] | payload
//! ```
//!
//! A multi-tensor file is a `u32` entry count followed by, per entry, a `u16`
//! name length, the UTF-8 name, and one record. Records are always written as
//! f64; f32 payloads are widened on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AOTB";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_F32: u8 = 2;

/// Named tensors in a deterministic (sorted) order.
pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_map(map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, t) in map {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::parse(field, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn tensor(&mut self, ctx: &str) -> Result<Tensor> {
        let f = |name: &str| format!("{ctx}.{name}");
        let magic = self.take(4, &f("magic"))?;
        if magic != MAGIC {
            return Err(Error::parse(f("magic"), format!("expected b\"AOTB\", found {magic:?}")));
        }
        let version = self.u8(&f("version"))?;
        if version != VERSION {
            return Err(Error::parse(f("version"), format!("unsupported version {version}")));
        }
        let dtype = self.u8(&f("dtype"))?;
        let width = match dtype {
            DTYPE_F64 => 8,
            DTYPE_F32 => 4,
            other => return Err(Error::parse(f("dtype"), format!("unknown dtype code {other}"))),
        };
        let rank = self.u8(&f("rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = self.u64(&f(&format!("dims[{i}]")))?;
            if d == 0 {
                return Err(Error::parse(f(&format!("dims[{i}]")), "zero-sized dimension"));
            }
            shape.push(usize::try_from(d).map_err(|_| Error::parse(f(&format!("dims[{i}]")), "dimension too large"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(f("dims"), "element count overflows"))?;
        let bytes = self.take(
            numel.checked_mul(width).ok_or_else(|| Error::parse(f("payload"), "payload size overflows"))?,
            &f("payload"),
        )?;
        let data: Vec<f64> = if dtype == DTYPE_F64 {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        Tensor::new(shape, data)
    }
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    let t = r.tensor("tensor")?;
    if r.pos != buf.len() {
        return Err(Error::parse("tensor", format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(t)
}

pub fn decode_map(buf: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { buf, pos: 0 };
    let count = r.u32("entry_count")?;
    let mut map = TensorMap::new();
    for i in 0..count {
        let len = r.u16(&format!("entry[{i}].name_length"))? as usize;
        let raw = r.take(len, &format!("entry[{i}].name"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::parse(format!("entry[{i}].name"), e.to_string()))?
            .to_string();
        let t = r.tensor(&format!("entry[{i}]({name})"))?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::parse(format!("entry[{i}].name"), format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::parse("file", format!("{} trailing bytes after {count} entries", buf.len() - r.pos)));
    }
    Ok(map)
}

pub fn write_map(path: &Path, map: &TensorMap) -> Result<()> {
    fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<TensorMap> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("b".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap());
        m.insert("a".into(), Tensor::scalar(4.0));
        m
    }

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), &mut buf);
        assert_eq!(&buf[..7], &[b'A', b'O', b'T', b'B', 1, 1, 1]);
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 15 + 16);
        assert_eq!(decode_tensor(&buf).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn map_round_trip() {
        let m = sample();
        assert_eq!(decode_map(&encode_map(&m)).unwrap(), m);
    }

    #[test]
    fn f32_is_widened() {
        let mut buf = Vec::from(*MAGIC);
        buf.extend_from_slice(&[VERSION, DTYPE_F32, 1]);
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&0.5f32.to_le_bytes());
        buf.extend_from_slice(&(-1.25f32).to_le_bytes());
        assert_eq!(decode_tensor(&buf).unwrap().data(), &[0.5, -1.25]);
    }

    #[test]
    fn truncation_is_an_error_at_every_cut() {
        let buf = encode_map(&sample());
        for cut in 0..buf.len() {
            assert!(matches!(decode_map(&buf[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version_name_the_field() {
        let mut buf = encode_map(&sample());
        let mut bad = buf.clone();
        // first record magic starts after count (4) + name len (2) + name "a" (1)
        bad[7] = b'X';
        match decode_map(&bad) {
            Err(Error::Parse { field, .. }) => assert!(field.ends_with("magic"), "{field}"),
            other => panic!("{other:?}"),
        }
        buf[11] = 9;
        match decode_map(&buf) {
            Err(Error::Parse { field, .. }) => assert!(field.ends_with("version"), "{field}"),
            other => panic!("{other:?}"),
        }
    }
}
