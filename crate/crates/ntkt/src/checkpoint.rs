//! Flat tensor archive.
//!
//! ```text
//! b"NTKTCKPT"  u32 version  u64 header_len  header (JSON, header_len bytes)  payload
//! ```
//!
//! All integers are little-endian. The header lists every tensor's name, shape,
//! element type and byte offset into the payload; each tensor is stored
//! row-major as little-endian `f32` or `f64`.

use std::fs;
use std::path::Path;

use ntkt_core::nn::Tensor;
use ntkt_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"NTKTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `ntkt` or `dkt`.
    pub family: String,
    pub config: serde_json::Value,
    /// Hex fingerprint of the vocabulary the model was trained with, if any.
    pub vocab_hash: Option<String>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    payload: Vec<u8>,
}

fn element_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

impl Checkpoint {
    pub fn new(family: &str, config: serde_json::Value, vocab_hash: Option<u64>, step: u64) -> Self {
        let header = Header {
            family: family.to_string(),
            config,
            vocab_hash: vocab_hash.map(|h| format!("{h:016x}")),
            step,
            tensors: Vec::new(),
        };
        Self { header, payload: Vec::new() }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.header.tensors.push(TensorEntry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: self.payload.len() as u64,
        });
        for &x in tensor.data() {
            match T::DTYPE {
                "f32" => self.payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => self.payload.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.iter().map(|t| t.name.as_str())
    }

    /// Loads a tensor, converting the stored element type to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::Integrity(format!("checkpoint has no tensor {name}")))?;
        let size = element_size(&entry.dtype).expect("validated on read");
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = &self.payload[start..start + n * size];
        let data = bytes
            .chunks_exact(size)
            .map(|c| match size {
                4 => T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::of(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        Ok(Tensor::new(entry.shape.clone(), data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| format!("bad header: {e}"))?;
        let payload = body[len..].to_vec();
        for t in &header.tensors {
            let size = element_size(&t.dtype).ok_or_else(|| format!("tensor {} has unknown dtype {}", t.name, t.dtype))?;
            let end = t.offset as usize + t.shape.iter().product::<usize>() * size;
            if end > payload.len() {
                return Err(format!("tensor {} runs past the end of the payload", t.name));
            }
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| CliError::Format { path: path.to_path_buf(), line: 0, message })
    }
}
