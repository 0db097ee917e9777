//! Self-describing array archive shared by every artifact file.
//!
//! Layout: 8 magic bytes, a little-endian `u32` header length, a JSON header,
//! then the raw little-endian payload. The header lists each array (name,
//! dtype, shape, byte offset) and the SHA-256 of the payload, which is
//! verified on every read.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, TpbError};

pub type Magic = [u8; 8];

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
        }
    }

    pub fn to_f64_2d(&self) -> Result<Array2<f64>> {
        let dyn_arr = match self {
            ArrayData::F32(a) => a.mapv(f64::from),
            ArrayData::F64(a) => a.clone(),
        };
        dyn_arr
            .into_dimensionality()
            .map_err(|e| TpbError::Shape(format!("expected a matrix: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Map<String, Value>,
    arrays: Vec<ArrayEntry>,
    payload_len: usize,
    payload_sha256: String,
}

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub meta: Map<String, Value>,
    pub arrays: Vec<(String, ArrayData)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serializable metadata");
        self.meta.insert(key.to_string(), v);
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| TpbError::Serde(format!("header lacks key `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| TpbError::Serde(format!("header key `{key}`: {e}")))
    }

    pub fn push_f32(&mut self, name: &str, a: ArrayD<f32>) {
        self.arrays.push((name.to_string(), ArrayData::F32(a)));
    }

    pub fn push_f64(&mut self, name: &str, a: ArrayD<f64>) {
        self.arrays.push((name.to_string(), ArrayData::F64(a)));
    }

    pub fn push_matrix(&mut self, name: &str, a: &Array2<f64>) {
        self.push_f64(name, a.clone().into_dyn());
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayData> {
        self.get(name)
            .ok_or_else(|| TpbError::Serde(format!("archive lacks array `{name}`")))
    }

    pub fn to_bytes(&self, magic: &Magic) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, data) in &self.arrays {
            let offset = payload.len();
            let dtype = match data {
                ArrayData::F32(a) => {
                    for v in a.as_standard_layout().iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f32"
                }
                ArrayData::F64(a) => {
                    for v in a.as_standard_layout().iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f64"
                }
            };
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: data.shape().to_vec(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = Header {
            meta: self.meta.clone(),
            arrays: entries,
            payload_len: payload.len(),
            payload_sha256: sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn write(&self, path: &Path, magic: &Magic) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| TpbError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes(magic)).map_err(|e| TpbError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], magic: &Magic, path: &Path) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(TpbError::corrupt(path, "file shorter than the magic header"));
        }
        if &bytes[..8] != magic {
            return Err(TpbError::Version {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if bytes.len() < 12 {
            return Err(TpbError::corrupt(path, "truncated header length"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let hend = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| TpbError::corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..hend])
            .map_err(|e| TpbError::corrupt(path, format!("unreadable header: {e}")))?;
        let payload = &bytes[hend..];
        if payload.len() != header.payload_len {
            return Err(TpbError::corrupt(
                path,
                format!("payload is {} bytes, header says {}", payload.len(), header.payload_len),
            ));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(TpbError::corrupt(path, "payload hash mismatch"));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let count: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(TpbError::corrupt(path, format!("unknown dtype {other}"))),
            };
            if count * width != e.nbytes || e.offset + e.nbytes > payload.len() {
                return Err(TpbError::corrupt(path, format!("array {} out of bounds", e.name)));
            }
            let raw = &payload[e.offset..e.offset + e.nbytes];
            let data = if width == 4 {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&e.shape), v).expect("checked size"))
            } else {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&e.shape), v).expect("checked size"))
            };
            arrays.push((e.name, data));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn read(path: &Path, magic: &Magic) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TpbError::io(path, e))?;
        Self::from_bytes(&bytes, magic, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a file on disk.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| TpbError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
