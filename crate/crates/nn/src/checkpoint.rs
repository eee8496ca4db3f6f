//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"RLCK"
//! version  u32
//! length   u64            byte length of the manifest
//! manifest UTF-8 JSON     [`Manifest`]
//! payload  f32 arrays     per model, per parameter: value, adam m, adam v
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::NnError;

pub const MAGIC: &[u8; 4] = b"RLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub adam_t: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Free-form architecture description supplied by the caller.
    pub architecture: serde_json::Value,
    pub step: u64,
    pub seeds: serde_json::Value,
    /// Extra resumable state (e.g. a reward baseline).
    pub extra: serde_json::Value,
    pub models: Vec<ModelEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Stores in manifest order.
    pub stores: Vec<ParamStore<f32>>,
}

impl Checkpoint {
    pub fn new(architecture: serde_json::Value, step: u64, seeds: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                architecture,
                step,
                seeds,
                extra: serde_json::Value::Null,
                models: Vec::new(),
            },
            stores: Vec::new(),
        }
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.manifest.extra = extra;
        self
    }

    pub fn add_model(&mut self, name: &str, store: &ParamStore<f32>) {
        let params = store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                adam_t: p.adam.t,
                trainable: p.trainable,
            })
            .collect();
        self.manifest.models.push(ModelEntry { name: name.to_string(), params });
        self.stores.push(store.clone());
    }

    pub fn model(&self, name: &str) -> Result<&ParamStore<f32>, NnError> {
        self.manifest
            .models
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.stores[i])
            .ok_or_else(|| NnError::MissingModel(name.to_string()))
    }

    /// Copies values and optimizer state of model `name` into `target`,
    /// which must have the same parameter names and shapes.
    pub fn restore_into(&self, name: &str, target: &mut ParamStore<f32>) -> Result<(), NnError> {
        let src = self.model(name)?;
        if src.len() != target.len() {
            return Err(NnError::ShapeMismatch {
                param: format!("{name}: parameter count"),
                expected: vec![target.len()],
                found: vec![src.len()],
            });
        }
        for (s, t) in src.iter().zip(target.iter()) {
            if s.name != t.name || s.value.shape() != t.value.shape() {
                return Err(NnError::ShapeMismatch {
                    param: format!("{name}.{}", t.name),
                    expected: t.value.shape().to_vec(),
                    found: s.value.shape().to_vec(),
                });
            }
        }
        for (s, t) in src.iter().zip(target.iter_mut()) {
            t.value = s.value.clone();
            t.adam = s.adam.clone();
            t.trainable = s.trainable;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for store in &self.stores {
            for p in store.iter() {
                for t in [&p.value, &p.adam.m, &p.adam.v] {
                    for x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| NnError::Corrupt("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(NnError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(NnError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() < len {
            return Err(NnError::Corrupt("truncated manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&r[..len]).map_err(|e| NnError::Corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(NnError::VersionMismatch { found: manifest.format_version, expected: version });
        }
        r = &r[len..];
        let mut stores = Vec::new();
        for model in &manifest.models {
            let mut store = ParamStore::new();
            for entry in &model.params {
                let n: usize = entry.shape.iter().product();
                let value = read_f32s(&mut r, n, &entry.name)?;
                let m = read_f32s(&mut r, n, &entry.name)?;
                let v = read_f32s(&mut r, n, &entry.name)?;
                let id = store.add(entry.name.clone(), Tensor::from_vec(&entry.shape, value));
                let p = store.get_mut(id);
                p.adam.m = Tensor::from_vec(&entry.shape, m);
                p.adam.v = Tensor::from_vec(&entry.shape, v);
                p.adam.t = entry.adam_t;
                p.trainable = entry.trainable;
            }
            stores.push(store);
        }
        if !r.is_empty() {
            return Err(NnError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { manifest, stores })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| NnError::Corrupt("truncated header".into()))?;
    Ok(buf)
}

fn read_f32s(r: &mut &[u8], n: usize, name: &str) -> Result<Vec<f32>, NnError> {
    if r.len() < n * 4 {
        return Err(NnError::Corrupt(format!("payload truncated in {name}")));
    }
    let (head, tail) = r.split_at(n * 4);
    *r = tail;
    Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
