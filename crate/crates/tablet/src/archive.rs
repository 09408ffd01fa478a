//! Single-file archive shared by the token cache, model checkpoints and codec files.
//!
//! Layout: 8-byte magic, CRC-32 of everything after it (u32 LE), header length
//! (u32 LE), a UTF-8 `key=value` header, then the tensor payloads back to back
//! in little-endian order. Each tensor is declared in the header as
//! `tensor=<name>:<f32|f64>:<d0,d1,...>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::blob::{format_kv, parse_kv};
use crate::{write_atomic, IoError, IoResult};

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta_str(&self, path: &Path, key: &str) -> IoResult<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| IoError::format(path, format!("missing header key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, path: &Path, key: &str) -> IoResult<T> {
        let v = self.meta_str(path, key)?;
        v.parse().map_err(|_| IoError::format(path, format!("bad value for {key}: {v}")))
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut header = format_kv(&self.meta);
        let mut payload = Vec::new();
        for t in &self.tensors {
            let dims = t.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
            let ty = match &t.data {
                TensorData::F32(v) => {
                    v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
                    "f32"
                }
                TensorData::F64(v) => {
                    v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
                    "f64"
                }
            };
            header.push_str(&format!("tensor={}:{ty}:{dims}\n", t.name));
        }
        let mut body = Vec::with_capacity(4 + header.len() + payload.len());
        body.extend_from_slice(&(header.len() as u32).to_le_bytes());
        body.extend_from_slice(header.as_bytes());
        body.extend_from_slice(&payload);
        let mut out = Vec::with_capacity(12 + body.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(path: &Path, magic: &[u8; 8], bytes: &[u8]) -> IoResult<Self> {
        if bytes.len() < 16 || &bytes[..8] != magic {
            return Err(IoError::format(path, format!("not a {} file", String::from_utf8_lossy(magic).trim_end_matches('\0'))));
        }
        let stored = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let body = &bytes[12..];
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(IoError::Checksum { path: path.display().to_string(), stored, computed });
        }
        let hlen = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
        let header = body.get(4..4 + hlen).ok_or_else(|| IoError::format(path, "truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| IoError::format(path, "header is not UTF-8"))?;
        let mut payload = &body[4 + hlen..];
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in header.lines() {
            if let Some(spec) = line.strip_prefix("tensor=") {
                let mut parts = spec.rsplitn(3, ':');
                let (dims, ty, name) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(d), Some(t), Some(n)) => (d, t, n),
                    _ => return Err(IoError::format(path, format!("bad tensor entry {spec}"))),
                };
                let shape: Vec<usize> = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',').map(|s| s.parse().map_err(|_| IoError::format(path, format!("bad shape {dims}")))).collect::<IoResult<_>>()?
                };
                let n: usize = shape.iter().product();
                let width = match ty {
                    "f32" => 4,
                    "f64" => 8,
                    _ => return Err(IoError::format(path, format!("unknown dtype {ty}"))),
                };
                if payload.len() < n * width {
                    return Err(IoError::format(path, format!("payload truncated at tensor {name}")));
                }
                let (raw, rest) = payload.split_at(n * width);
                payload = rest;
                let data = if width == 4 {
                    TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                } else {
                    TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                };
                debug_assert_eq!(data.len(), n);
                tensors.push(Tensor { name: name.to_string(), shape, data });
            } else {
                meta.extend(parse_kv(line));
            }
        }
        if !payload.is_empty() {
            return Err(IoError::format(path, format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> IoResult<()> {
        write_atomic(path, &self.to_bytes(magic))
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> IoResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::from_bytes(path, magic, &bytes)
    }
}
