//! Bit-exact weight container.
//!
//! Layout, all integers little-endian: magic `SDWT`, u32 version (1), u32
//! entry count; per entry u16 name length, name bytes (UTF-8), u8 dtype
//! (0 = f32), u8 ndim, ndim u32 dims, then the raw little-endian payload.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

const MAGIC: &[u8; 4] = b"SDWT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One named tensor entry.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl StoreEntry {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Ordered collection of named tensors with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub entries: Vec<StoreEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Store(format!("duplicate name {name}")));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if numel != data.len() {
            return Err(Error::Store(format!(
                "{name}: {} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        self.entries.push(StoreEntry { name, dims, data });
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor4<T>) -> Result<()> {
        let dims = t.dims().map(|d| d as u32).to_vec();
        let data = t.data().iter().map(|v| v.to_f32().unwrap()).collect();
        self.insert(name, dims, data)
    }

    pub fn get(&self, name: &str) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor4<T>> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Store(format!("missing entry {name}")))?;
        if e.dims.len() != 4 {
            return Err(Error::Store(format!("{name}: {} dims, need 4", e.dims.len())));
        }
        let dims = [e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize, e.dims[3] as usize];
        Tensor4::new(dims, e.data.iter().map(|&v| T::from_f32(v).unwrap()).collect())
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Store(format!("missing entry {name}")))?;
        if e.numel() != 1 {
            return Err(Error::Store(format!("{name} is not scalar")));
        }
        Ok(e.data[0])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Store("truncated payload".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Store("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Store(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut store = WeightStore::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Store("name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Store(format!("duplicate name {name}")));
            }
            let dtype = take(&mut pos, 1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Store(format!("unsupported dtype {dtype}")));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
            }
            let numel: usize = dims.iter().map(|&d| d as usize).product();
            let raw = take(&mut pos, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.entries.push(StoreEntry { name, dims, data });
        }
        if pos != bytes.len() {
            return Err(Error::Store("trailing bytes after last entry".into()));
        }
        Ok(store)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_twelve_bytes() {
        let s = WeightStore::new();
        assert_eq!(s.encode().len(), 12);
        assert_eq!(WeightStore::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn round_trip_bitwise() {
        let mut s = WeightStore::new();
        s.insert("a", vec![2, 2], vec![1.5, -0.25, f32::MIN_POSITIVE, 3.0e7]).unwrap();
        s.insert("b.fused", vec![1, 1, 1, 3], vec![0.1, 0.2, -0.3]).unwrap();
        let bytes = s.encode();
        let back = WeightStore::decode(&bytes).unwrap();
        assert_eq!(back, s);
        // bit-level identity of payloads
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_duplicates() {
        let mut s = WeightStore::new();
        s.insert("x", vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = s.encode();
        bytes[0] = b'X';
        assert!(WeightStore::decode(&bytes).is_err());
        let bytes = s.encode();
        assert!(WeightStore::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(s.insert("x", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn flipped_payload_byte_still_decodes() {
        // the format is checksum-free: corruption surfaces downstream
        let mut s = WeightStore::new();
        s.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = s.encode();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let back = WeightStore::decode(&bytes).unwrap();
        assert_ne!(back.get("w").unwrap().data[3], 4.0);
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor4::<f64>::from_fn([1, 2, 2, 2], |n, c, h, w| (n + 2 * c + 4 * h + 8 * w) as f64 * 0.5);
        let mut s = WeightStore::new();
        s.insert_tensor("t", &t).unwrap();
        let back: Tensor4<f32> = s.tensor("t").unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in back.data().iter().zip(t.data().iter()) {
            assert_eq!(*a, *b as f32);
        }
    }
}
