//! Binary parameter checkpoints.
//!
//! Layout: magic `PRSM`, `u32` version, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and raw `f32`
//! values. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRSM";
pub const VERSION: u32 = 1;
/// Reserved entry holding the run seed as four 16-bit chunks, low first.
pub const SEED_ENTRY: &str = "meta.seed";

fn seed_tensor(seed: u64) -> Tensor {
    let chunks = (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], chunks).expect("four chunks")
}

fn seed_from(t: &Tensor) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Checkpoint(format!("{SEED_ENTRY} has shape {:?}", t.shape())));
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("{SEED_ENTRY} chunk {v} is not a u16")));
        }
        Ok(acc | ((v as u64) << (16 * i)))
    })
}

pub fn encode(store: &ParamStore, seed: Option<u64>) -> Result<Vec<u8>> {
    let mut entries: Vec<(&str, &Tensor)> = store.iter().map(|(n, e)| (n, &e.value)).collect();
    let seed_t = seed.map(seed_tensor);
    if let Some(t) = &seed_t {
        if store.contains(SEED_ENTRY) {
            return Err(Error::Checkpoint(format!("parameter name {SEED_ENTRY} is reserved")));
        }
        entries.push((SEED_ENTRY, t));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parameters and the optional seed entry.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Option<u64>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    let mut seed = None;
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(c.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if name == SEED_ENTRY {
            seed = Some(seed_from(&t)?);
        } else {
            store.insert(name, t)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((store, seed))
}

pub fn save(path: &Path, store: &ParamStore, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(store, seed)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Option<u64>)> {
    decode(&fs::read(path)?)
}

/// Overwrites `store` with the checkpoint's values after checking that the
/// names and shapes agree exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<Option<u64>> {
    let (loaded, seed) = load(path)?;
    store.check_compatible(&loaded)?;
    for (name, e) in loaded.iter() {
        store.set(name, e.value.clone())?;
    }
    Ok(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_bytes_fail() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(&[3])).unwrap();
        let bytes = encode(&s, None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"nope").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20), seed in any::<u64>()) {
            let mut s = ParamStore::new();
            s.insert("a.w", Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
            s.insert("b", Tensor::new(&[1], vec![-0.0]).unwrap()).unwrap();
            let (back, got) = decode(&encode(&s, Some(seed)).unwrap()).unwrap();
            prop_assert_eq!(got, Some(seed));
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.get("a.w").unwrap()), bits(s.get("a.w").unwrap()));
            prop_assert_eq!(bits(back.get("b").unwrap()), bits(s.get("b").unwrap()));
        }
    }
}
