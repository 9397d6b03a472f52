//! Self-describing binary archives: a JSON header followed by little-endian `f64` tensor blocks.
//!
//! Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, then the tensors listed in the
//! header's `tensors` array, in order, as raw `f64` LE values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"IDFLOW\0\x01";
pub const FORMAT_MAJOR: u64 = 1;
pub const FORMAT_VERSION: &str = "1.0";

/// Major component of a `"major.minor"` format version.
pub fn format_major(version: &str) -> Option<u64> {
    version.split('.').next()?.parse().ok()
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    kind: String,
    meta: Map<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Map<String, Value>,
    tensors: Vec<(String, Tensor<f64>)>,
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::format(path, detail)
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set<V: Serialize>(&mut self, key: &str, value: &V) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Config(format!("cannot encode {key}: {e}")))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Config(format!("{} archive has no `{key}` entry", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("bad `{key}` entry: {e}")))
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = t.data().iter().map(|x| x.as_f64()).collect();
        let t64 = Tensor::new(t.shape().to_vec(), data).expect("shape already valid");
        self.tensors.push((name.into(), t64));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (_, t) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("{} archive has no tensor `{name}`", self.kind)))?;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| T::of(x)).collect())
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(malformed(path, format!("expected a {kind} file, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION.to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header is plain JSON");
        let body: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(malformed(path, "not an idflow archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| malformed(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| malformed(path, format!("bad header: {e}")))?;
        let major = format_major(&header.format_version).ok_or_else(|| malformed(path, format!("bad format version {:?}", header.format_version)))?;
        if major != FORMAT_MAJOR {
            return Err(malformed(path, format!("unsupported format major version {major}")));
        }
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let chunk = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| malformed(path, format!("truncated tensor `{}`", entry.name)))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| malformed(path, e.to_string()))?;
            tensors.push((entry.name, t));
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(malformed(path, "trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    tmp.set_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
