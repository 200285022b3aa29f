//! Named-array container used for backbone weights, adapter checkpoints and
//! embedding files.
//!
//! On disk this is the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping each array name to `{dtype, shape,
//! data_offsets}` plus a `__metadata__` string map, then the raw
//! little-endian data. Arrays are written as `F64`; `F32` arrays are
//! widened on load so externally exported weights can be imported.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    pub arrays: BTreeMap<String, ArrayD<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn insert1(&mut self, name: impl Into<String>, array: &Array1<f64>) {
        self.insert(name, array.clone().into_dyn());
    }

    pub fn insert2(&mut self, name: impl Into<String>, array: &Array2<f64>) {
        self.insert(name, array.clone().into_dyn());
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn require1(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let a = self.require(name)?;
        check_shape(name, &[len], a.shape())?;
        Ok(a.clone().into_dimensionality().expect("checked rank"))
    }

    pub fn require2(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let a = self.require(name)?;
        check_shape(name, &[rows, cols], a.shape())?;
        Ok(a.clone().into_dimensionality().expect("checked rank"))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing metadata key `{key}`")))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// SHA-256 over every array's name, shape and little-endian `f64` bytes,
    /// in name order. Metadata is not part of the fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, array) in &self.arrays {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((array.ndim() as u64).to_le_bytes());
            for &dim in array.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for v in array.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Serialises to the safetensors layout. The header is written with
    /// sorted keys and arrays are laid out in name order, so equal contents
    /// always give equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0usize;
        for (name, a) in &self.arrays {
            let len = a.len() * 8;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": "F64",
                    "shape": a.shape(),
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut head = serde_json::to_vec(&serde_json::Value::Object(header))?;
        while head.len() % 8 != 0 {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for a in self.arrays.values() {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let mut out = NamedArrays::new();
        if let Some(meta) = header.metadata() {
            out.metadata = meta.clone().into_iter().collect();
        }
        for (name, view) in tensors.tensors() {
            let data = view.data();
            let values: Vec<f64> = match view.dtype() {
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => {
                    return Err(Error::Container(format!(
                        "array `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Container(format!("array `{name}`: {e}")))?;
            out.arrays.insert(name, array);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn check_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeConflict {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}
