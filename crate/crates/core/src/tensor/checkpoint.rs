//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header naming every tensor and its shape, then the values as
//! little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};
use crate::{Error, Result};

const FORMAT: &str = "ant-params-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let header = Header {
        format: FORMAT.to_string(),
        tensors: store
            .ids()
            .map(|id| Entry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape.clone(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let payload: usize = store.ids().map(|id| store.get(id).len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + payload * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in &store.get(id).data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore, TensorError> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad("unknown format tag"));
    }
    let mut rest = &bytes[8 + hlen..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if rest.len() < n * 8 {
            return Err(bad("truncated payload"));
        }
        let data = rest[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[n * 8..];
        store.add(e.name, Tensor::new(e.shape, data)?, e.trainable);
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(params_from_bytes(&bytes)?)
}
