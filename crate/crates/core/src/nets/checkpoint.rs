//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!   bytes 0..8    magic `VEILCKPT`
//!   bytes 8..12   container version (u32)
//!   bytes 12..20  JSON header length (u64)
//!   header        JSON: kind, config records, metadata, tensor index
//!   payload       raw tensor data at the offsets named in the index
//!
//! The header's tensor index carries (name, dtype, shape, offset, byte_len);
//! unknown metadata keys are preserved, so the format is stable across minor
//! versions. See `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use veil_tensor::Tensor;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VEILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    configs: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub struct CheckpointBuilder {
    kind: String,
    configs: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl CheckpointBuilder {
    pub fn new(kind: &str) -> Self {
        CheckpointBuilder {
            kind: kind.to_string(),
            configs: serde_json::Value::Object(Default::default()),
            meta: serde_json::Value::Object(Default::default()),
            tensors: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn config(mut self, name: &str, value: impl Serialize) -> Self {
        self.configs[name] = serde_json::to_value(value).expect("config serializes");
        self
    }

    pub fn meta(mut self, name: &str, value: impl Serialize) -> Self {
        self.meta[name] = serde_json::to_value(value).expect("meta serializes");
        self
    }

    pub fn add_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let offset = self.payload.len() as u64;
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: shape.to_vec(),
            offset,
            byte_len: (data.len() * 4) as u64,
        });
    }

    pub fn add_named_params(&mut self, prefix: &str, params: &[(String, Tensor<f32>)]) {
        for (name, t) in params {
            self.add_f32(&format!("{prefix}.{name}"), t.shape(), &t.data());
        }
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn write(self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            configs: self.configs,
            meta: self.meta,
            tensors: self.tensors,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(CHECKPOINT_MAGIC)?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&header_bytes)?;
            f.write_all(&self.payload)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub struct Checkpoint {
    header: Header,
    by_name: BTreeMap<String, usize>,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if bytes.len() < 20 || &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])?;
        let payload = bytes[20 + hlen..].to_vec();
        let mut by_name = BTreeMap::new();
        for (i, t) in header.tensors.iter().enumerate() {
            let end = (t.offset + t.byte_len) as usize;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor '{}' exceeds payload", t.name)));
            }
            by_name.insert(t.name.clone(), i);
        }
        Ok(Checkpoint { header, by_name, payload })
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn config<T: for<'a> Deserialize<'a>>(&self, name: &str) -> Result<T> {
        let v = self
            .header
            .configs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing config record '{name}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn f32_tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        let entry = &self.header.tensors[*idx];
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype {} (expected f32)",
                entry.dtype
            )));
        }
        let raw = &self.payload[entry.offset as usize..(entry.offset + entry.byte_len) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    /// Load values into an existing parameter list; every parameter must be
    /// present with a matching shape.
    pub fn load_named_params(&self, prefix: &str, params: &[(String, Tensor<f32>)]) -> Result<()> {
        for (name, t) in params {
            let (shape, data) = self.f32_tensor(&format!("{prefix}.{name}"))?;
            if shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{prefix}.{name}' shape {:?} does not match expected {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.set_data(&data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.veil");
        let mut b = CheckpointBuilder::new("test").meta("iteration", 7u64);
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.37 - 1.0).collect();
        b.add_f32("layer.weight", &[2, 3, 2, 2], &data);
        b.write(&path).unwrap();

        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.kind(), "test");
        assert_eq!(ck.meta()["iteration"], 7);
        let (shape, back) = ck.f32_tensor("layer.weight").unwrap();
        assert_eq!(shape, vec![2, 3, 2, 2]);
        assert_eq!(back, data);
        assert!(ck.f32_tensor("nope").is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.veil");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
