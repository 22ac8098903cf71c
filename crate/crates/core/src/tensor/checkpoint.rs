//! Binary checkpoint: magic, little-endian `u64` header length, a JSON
//! header, then every tensor as raw little-endian `f64`s.
//!
//! The header lists `{name, shape, offset}` per tensor (offset in bytes
//! from the start of the data block) plus a free-form `meta` object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

const MAGIC: &[u8; 8] = b"CVSTCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(store.len());
        let mut offset = 0;
        for (_, p) in store.iter() {
            tensors.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len() * 8;
        }
        let header = serde_json::to_vec(&Header {
            tensors,
            meta: meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in store.iter() {
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut params = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > data.len() {
                return Err(bad(&format!("tensor `{}` runs past the end of the file", e.name)));
            }
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, values)?);
        }
        Ok(Checkpoint {
            meta: header.meta,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    atomic_write(path, &Checkpoint::to_bytes(store, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut store = ParamStore::new();
            store.insert("a", Tensor::matrix(rows, cols, values[..rows * cols].to_vec()).unwrap());
            store.insert("b.bias", Tensor::vector(values.clone()));
            let meta = serde_json::json!({"hidden": 3});
            let bytes = Checkpoint::to_bytes(&store, &meta).unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.meta, meta);
            for ((_, p), (_, q)) in store.iter().zip(back.params.iter()) {
                prop_assert_eq!(&p.name, &q.name);
                prop_assert_eq!(p.value.shape(), q.value.shape());
                let pb: Vec<u64> = p.value.data().iter().map(|x| x.to_bits()).collect();
                let qb: Vec<u64> = q.value.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(pb, qb);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
    }
}
