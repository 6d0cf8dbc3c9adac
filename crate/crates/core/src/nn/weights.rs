//! `.ifw` weight container.
//!
//! Layout: the 4 magic bytes `IFW1`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor's values as little-endian `f32`, in header order.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"IFW1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub version: u32,
    pub dtype: String,
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub header: WeightHeader,
    pub values: Vec<Vec<f32>>,
}

impl WeightFile {
    pub fn architecture<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.header.architecture.clone())
            .map_err(|e| Error::WeightFile(format!("bad architecture metadata: {e}")))
    }

    pub fn into_store<T: Real>(self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (entry, vals) in self.header.tensors.into_iter().zip(self.values) {
            let data = vals.into_iter().map(|v| T::lit(v as f64)).collect();
            store.add(entry.name, Tensor::new(entry.shape, data).expect("validated on decode"));
        }
        store
    }
}

pub fn encode_weights<T: Real>(architecture: &impl Serialize, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let header = WeightHeader {
        version: FORMAT_VERSION,
        dtype: "f32".into(),
        architecture: serde_json::to_value(architecture)
            .map_err(|e| Error::WeightFile(format!("architecture: {e}")))?,
        tensors: store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::WeightFile(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightFile> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::WeightFile("not an .ifw file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::WeightFile(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::WeightFile("truncated header".into()));
    }
    let header: WeightHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::WeightFile(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::WeightFile(format!("unsupported dtype `{}`", header.dtype)));
    }
    let mut rest = &body[hlen..];
    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let need = 4 * n;
        if rest.len() < need {
            return Err(Error::WeightFile(format!(
                "tensor `{}` truncated: needs {need} bytes, {} remain",
                entry.name,
                rest.len()
            )));
        }
        let vals = rest[..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(vals);
        rest = &rest[need..];
    }
    if !rest.is_empty() {
        return Err(Error::WeightFile(format!(
            "{} trailing bytes after last tensor",
            rest.len()
        )));
    }
    Ok(WeightFile { header, values })
}

pub fn write_weights<T: Real>(path: &Path, architecture: &impl Serialize, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_weights(architecture, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<WeightFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "a.w",
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e7]).unwrap(),
        );
        s.add("a.b", Tensor::new(vec![3], vec![0.5, 0.25, -0.125]).unwrap());
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let arch = serde_json::json!({"kind": "test", "hidden": 3});
        let bytes = encode_weights(&arch, &store()).unwrap();
        let file = decode_weights(&bytes).unwrap();
        assert_eq!(file.header.architecture, arch);
        let again = encode_weights(&file.header.architecture.clone(), &file.into_store::<f32>()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_tensor_is_named() {
        let bytes = encode_weights(&serde_json::json!({}), &store()).unwrap();
        let err = decode_weights(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("`a.b`"), "{err}");
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = encode_weights(&serde_json::json!({}), &store()).unwrap();
        bytes[4] = 9;
        assert!(decode_weights(&bytes).unwrap_err().to_string().contains("version"));
        assert!(decode_weights(b"nope").is_err());
    }
}
