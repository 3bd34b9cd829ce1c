//! Parameter checkpoints: a magic line, one JSON header line, then every
//! tensor as little-endian f64 in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "DOREMI-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Free-form structured description (dims, config, seed).
    pub meta: serde_json::Value,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, store: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            meta,
            store,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            params: self
                .store
                .iter()
                .map(|(id, name, t)| Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    frozen: self.store.is_frozen(id),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{json}")?;
        for (_, _, t) in self.store.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let bad = |m: String| CheckpointError::Format(m);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing magic".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(e.to_string()))?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut store = ParamStore::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| bad(format!("truncated blob for {}", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(err.to_string()))?;
            if store.find(&e.name).is_some() {
                return Err(bad(format!("duplicate parameter {}", e.name)));
            }
            if e.frozen {
                store.add_frozen(e.name, t);
            } else {
                store.add(e.name, t);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            store,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(fs::File::open(path)?)
    }

    pub fn hash(&self) -> Result<String, CheckpointError> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Copies every `src` tensor whose name exists in `dst`; returns how many.
/// A name match with a different shape is an error.
pub fn copy_matching(dst: &mut ParamStore, src: &ParamStore) -> Result<usize, CheckpointError> {
    let mut n = 0;
    for (_, name, t) in src.iter() {
        let Some(id) = dst.find(name) else { continue };
        if dst.get(id).shape() != t.shape() {
            return Err(CheckpointError::Format(format!(
                "{name}: shape {:?} vs {:?}",
                dst.get(id).shape(),
                t.shape()
            )));
        }
        *dst.get_mut(id) = t.clone();
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.add_frozen("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = Checkpoint::new("test", serde_json::json!({"d": 4}), store());
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(back.store.is_frozen(back.store.find("b").unwrap()));
        let bits = |s: &ParamStore| -> Vec<u64> { s.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect() };
        assert_eq!(bits(&back.store), bits(&c.store));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = Checkpoint::new("t", serde_json::Value::Null, store()).to_bytes().unwrap();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::read(&b"NOPE\n{}\n"[..]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(extra.as_slice()).is_err());
    }

    #[test]
    fn copy_matching_by_name() {
        let src = store();
        let mut dst = ParamStore::new();
        let a = dst.add("a", Tensor::zeros(&[2, 2]));
        dst.add("c", Tensor::zeros(&[1]));
        assert_eq!(copy_matching(&mut dst, &src).unwrap(), 1);
        assert_eq!(dst.get(a), src.get(src.find("a").unwrap()));
        let mut wrong = ParamStore::new();
        wrong.add("b", Tensor::zeros(&[2]));
        assert!(copy_matching(&mut wrong, &src).is_err());
    }
}
