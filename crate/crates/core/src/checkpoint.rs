//! Versioned binary archive of named f64 tensors plus a JSON header.
//!
//! Layout: the 8-byte magic, a little-endian u32 version, a u64 header
//! length, the UTF-8 JSON header, then every tensor's values as
//! little-endian f64 at the byte offset recorded in the header.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"GUDACKPT";
pub const FORMAT_VERSION: u32 = 1;

pub const TEACHER_PREFIX: &str = "teacher/";
pub const ADAM_M_PREFIX: &str = "adam_m/";
pub const ADAM_V_PREFIX: &str = "adam_v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    /// Student, teacher, guider and optimizer state; resumable.
    Training,
    /// Student parameters only.
    Inference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ArchiveKind,
    step: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub step: u64,
    /// Free-form JSON (run config, optimizer step counts, ...).
    pub metadata: serde_json::Value,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl Archive {
    pub fn new(kind: ArchiveKind, step: u64, metadata: serde_json::Value) -> Self {
        Archive {
            kind,
            step,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.push((name.into(), value));
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, v) in store.iter() {
            self.push(format!("{prefix}{name}"), v.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Overwrites `store` from tensors named `prefix + name`. Every
    /// parameter must be present with a matching shape.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let value = self
                .get(&key)
                .ok_or_else(|| Error::Param(format!("archive has no tensor {key}")))?;
            if value.shape() != store.get(id).shape() {
                return Err(Error::Param(format!(
                    "{key}: archive shape {:?} vs model {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            store.get_mut(id).assign(value);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, v) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * v.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(20 + json.len() + offset as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported archive version {version}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            if t.dtype != "f64" {
                return Err(Error::format(path, format!("{}: dtype {}", t.name, t.dtype)));
            }
            let len: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start + 8 * len;
            if end > data.len() {
                return Err(Error::format(path, format!("{}: truncated data", t.name)));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values)
                .map_err(|e| Error::format(path, e.to_string()))?;
            tensors.push((t.name, arr));
        }
        Ok(Archive {
            kind: header.kind,
            step: header.step,
            metadata: header.metadata,
            tensors,
        })
    }
}
