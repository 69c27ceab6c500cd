//! Versioned tensor archives.
//!
//! Layout: magic bytes, `u64` little-endian header length, a JSON header
//! `{"meta": .., "tensors": [{"name", "shape", "offset"}]}`, then every tensor
//! as raw little-endian `f32` in header order. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Archive {
    pub fn write(&self, path: &Path, magic: &str) -> Result<()> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Shape(format!("archive tensor {name}: {shape:?}")));
            }
            entries.push(Entry { name: name.clone(), shape: shape.clone(), offset });
            offset += data.len();
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(magic.as_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, data) in self.tensors.values() {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &str) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut got = vec![0u8; magic.len()];
        r.read_exact(&mut got)
            .map_err(|_| Error::Archive(format!("{}: truncated", path.display())))?;
        if got != magic.as_bytes() {
            return Err(Error::Archive(format!(
                "{}: expected magic {magic:?}, found {:?}",
                path.display(),
                String::from_utf8_lossy(&got)
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)
            .map_err(|_| Error::Archive("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut tensors = TensorMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Archive(format!("tensor {} out of bounds", e.name)))?;
            tensors.insert(e.name, (e.shape, data.to_vec()));
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        Archive::default().write(&path, "AAAA1").unwrap();
        assert!(matches!(Archive::read(&path, "BBBB1"), Err(Error::Archive(_))));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut a = Archive { meta: serde_json::json!({"k": 4}), ..Default::default() };
        a.tensors.insert("w".into(), (vec![2, 2], vec![0.1, -3.5e-20, f32::MAX, 1.0 / 3.0]));
        a.tensors.insert("b".into(), (vec![1], vec![7.0]));
        a.write(&path, "TEST1").unwrap();
        assert_eq!(Archive::read(&path, "TEST1").unwrap(), a);
    }
}
