//! Named parameter storage and the `.gdp` checkpoint format.
//!
//! `.gdp` layout (little-endian): magic `GDP1`, `u32` entry count, then per
//! entry `u16` name length, UTF-8 name, four `u32` dims, `f32` payload.
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gdf::write_atomic;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"GDP1";

pub type GradMap = BTreeMap<String, Tensor>;

/// Parameters keyed by dot-separated path. Values are kept rounded to `f32`
/// so that checkpoints round-trip exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.quantize_f32();
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn copy_prefix(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.entries.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    /// Sum of squared L2 distances over shared names.
    pub fn sq_distance(&self, other: &ParamStore, prefix: &str) -> f64 {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, a)| other.get(k).map(|b| (a, b)))
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected GDP1".into()));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            debug_assert_eq!(numel(shape), n);
            if store.entries.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("b.weight", Tensor::from_fn([2, 3, 1, 1], |[o, i, _, _]| (o as f64 - i as f64) / 3.0));
        p.insert("a.bias", Tensor::full([1, 2, 1, 1], 0.1));
        p
    }

    #[test]
    fn values_are_stored_as_f32() {
        let p = sample();
        assert_eq!(p.get("a.bias").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn entries_are_encoded_in_name_order() {
        let b = sample().encode();
        assert_eq!(&b[..4], b"GDP1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[8..10].try_into().unwrap()), 6);
        assert_eq!(&b[10..16], b"a.bias");
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let b = sample().encode();
        assert!(matches!(ParamStore::decode(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = b.clone();
        bad[3] = b'0';
        assert!(matches!(ParamStore::decode(&bad), Err(Error::Format(_))));
    }
}
