//! The `ESMG` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 0..4         | magic `ESMG`                                   |
//! | 4..8         | version, `u32` = 1                             |
//! | 8..16        | JSON header length `J`, `u64`                  |
//! | 16..16+J     | UTF-8 JSON header                              |
//! | 16+J..       | tensor payloads, row-major, in offset order    |
//!
//! The header is a JSON object holding free-form metadata (config,
//! provenance, span layouts, ...) plus a reserved `tensors` array with one
//! `{name, shape, dtype, byte_offset}` entry per tensor. Offsets are
//! relative to the start of the payload section and leave no padding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"ESMG";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named tensor held in 64-bit precision; `dtype` selects the on-disk width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_mat(name: impl Into<String>, m: &Mat, dtype: DType) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            dtype,
            data: m.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64], dtype: DType) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![v.len()],
            dtype,
            data: v.to_vec(),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        match self.shape[..] {
            [r, c] => Ok(Mat::from_vec(r, c, self.data.clone())),
            _ => Err(Error::Shape(format!(
                "tensor `{}` has shape {:?}, expected a matrix",
                self.name, self.shape
            ))),
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    byte_offset: u64,
}

/// Metadata plus an ordered list of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    pub meta: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("`{key}`: {e}")))
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn mat(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let t = self.require(name)?;
        if t.shape != [rows, cols] {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected [{rows}, {cols}]",
                t.shape
            )));
        }
        t.to_mat()
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        if t.shape != [len] {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected [{len}]",
                t.shape
            )));
        }
        Ok(t.data.clone())
    }

    /// Encodes the container. Refuses non-finite values, naming the tensor.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.meta.contains_key("tensors") {
            return Err(Error::Format("`tensors` is a reserved header key".into()));
        }
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.numel() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: t.name.clone(),
                    index,
                });
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype,
                byte_offset: offset,
            });
            offset += (t.data.len() * t.dtype.size()) as u64;
        }
        let mut header = self.meta.clone();
        header.insert(
            "tensors".into(),
            serde_json::to_value(&entries).map_err(|e| Error::Format(e.to_string()))?,
        );
        let json = serde_json::to_vec(&Value::Object(header)).map_err(|e| Error::Format(e.to_string()))?;

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Decodes a container; `origin` names the source in diagnostics.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(origin.to_string()));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Truncated(format!("{origin}: preamble is incomplete")));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (PREAMBLE as u64)
            .checked_add(json_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{origin}: header claims {json_len} bytes, file has {}",
                    bytes.len() - PREAMBLE
                ))
            })? as usize;

        let header: Value = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| Error::Format(format!("{origin}: header JSON: {e}")))?;
        let Value::Object(mut meta) = header else {
            return Err(Error::Format(format!("{origin}: header is not a JSON object")));
        };
        let entries: Vec<TensorEntry> = match meta.remove("tensors") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Format(format!("{origin}: tensor table: {e}")))?,
            None => return Err(Error::Format(format!("{origin}: header has no tensor table"))),
        };

        let payload = &bytes[payload_start..];
        let mut expected = 0u64;
        for e in &entries {
            if e.byte_offset != expected {
                return Err(Error::Format(format!(
                    "{origin}: tensor `{}` at offset {} but previous payload ends at {expected}",
                    e.name, e.byte_offset
                )));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("{origin}: shape of `{}` overflows", e.name)))?;
            expected = numel
                .checked_mul(e.dtype.size() as u64)
                .and_then(|n| n.checked_add(expected))
                .ok_or_else(|| Error::Format(format!("{origin}: payload size overflows")))?;
        }
        if (payload.len() as u64) < expected {
            return Err(Error::Truncated(format!(
                "{origin}: payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        if (payload.len() as u64) > expected {
            return Err(Error::Shape(format!(
                "{origin}: payload has {} bytes, header describes only {expected}",
                payload.len()
            )));
        }

        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let start = e.byte_offset as usize;
            let numel: usize = e.shape.iter().product();
            let raw = &payload[start..start + numel * e.dtype.size()];
            let data: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name: e.name, index });
            }
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                data,
            });
        }
        Ok(TensorSet { meta, tensors })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, set: &TensorSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = set.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorSet::from_bytes(&bytes, &path.display().to_string())
}
