//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then raw f64 LE
//! tensor payload. The header carries kind, step, arbitrary JSON metadata,
//! named RNG states, and a tensor directory (name, shape, payload offset in
//! elements) sorted by name. Writes go through a temp file and rename so a
//! crash never leaves a torn checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::rng::RngState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSEGCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    meta: serde_json::Value,
    rng: BTreeMap<String, RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub meta: serde_json::Value,
    pub rng: BTreeMap<String, RngState>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            step,
            meta,
            rng: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = t.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            meta: self.meta.clone(),
            rng: self.rng.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header)?;

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&(hjson.len() as u64).to_le_bytes())?;
            f.write_all(&hjson)?;
            let mut buf = Vec::with_capacity(1 << 20);
            for (_, t) in &self.tensors {
                for &v in t.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                    if buf.len() >= (1 << 20) {
                        f.write_all(&buf)?;
                        buf.clear();
                    }
                }
            }
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format(format!("{}: file too short", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut lenb = [0u8; 8];
        f.read_exact(&mut lenb)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        let hlen = u64::from_le_bytes(lenb) as usize;
        let mut hjson = vec![0u8; hlen];
        f.read_exact(&mut hjson)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        let header: Header = serde_json::from_slice(&hjson)
            .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;

        let total: u64 = header.tensors.iter().map(|t| t.len).sum();
        let mut payload = vec![0u8; (total * 8) as usize];
        f.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(Error::Format(format!(
                "{}: trailing bytes after payload",
                path.display()
            )));
        }

        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if n as u64 != e.len {
                return Err(Error::Format(format!(
                    "{}: tensor '{}' shape/len mismatch",
                    path.display(),
                    e.name
                )));
            }
            let start = (e.offset * 8) as usize;
            let end = start + (e.len * 8) as usize;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "{}: tensor '{}' overruns payload",
                    path.display(),
                    e.name
                )));
            }
            let vals: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|e2| Error::Format(format!("tensor '{}': {e2}", e.name)))?;
            tensors.insert(e.name.clone(), arr);
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            meta: header.meta,
            rng: header.rng,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, STREAM_DATA};

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ck = Checkpoint::new("mae", 17, serde_json::json!({"lr": 0.1}));
        ck.insert(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.25, 0.0, 1e-300, f64::MIN, 3.125])
                .unwrap(),
        );
        ck.insert("b", ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.875]).unwrap());
        let mut rng = seeded(9, STREAM_DATA);
        use rand::Rng;
        let _: u64 = rng.gen();
        ck.rng.insert("data".into(), RngState::capture(&rng));
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "mae");
        assert_eq!(back.step, 17);
        assert_eq!(back.meta["lr"], 0.1);
        assert_eq!(back.tensors.len(), 2);
        let w = back.tensor("w").unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        for (a, b) in w.iter().zip(ck.tensor("w").unwrap().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // RNG state restores to an identical stream.
        let mut r1 = back.rng["data"].restore().unwrap();
        let mut r2 = rng;
        for _ in 0..10 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut ck = Checkpoint::new("seg", 1, serde_json::Value::Null);
        ck.insert("w", ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn missing_tensor_reported() {
        let ck = Checkpoint::new("seg", 0, serde_json::Value::Null);
        assert!(ck.tensor("nope").is_err());
    }
}
