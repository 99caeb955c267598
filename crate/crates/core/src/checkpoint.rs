//! Model archives.
//!
//! Layout: the ASCII magic `MINETLAB1`, a little-endian `u64` header length,
//! a JSON header (model config, optional training state, tensor index), then
//! every tensor as little-endian `f64` in index order.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::model::{MiNet, ModelConfig};
use crate::nn::ParamStore;
use crate::trainer::TrainState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"MINETLAB1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    state: Option<TrainState>,
    tensors: Vec<TensorEntry>,
}

/// A loaded archive.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: Option<TrainState>,
    pub tensors: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn capture(model: &ModelConfig, store: &ParamStore, state: Option<TrainState>) -> Self {
        Checkpoint {
            model: model.clone(),
            state,
            tensors: store.named_tensors(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            state: self.state.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = self.tensors.values().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + total * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| bad("not a minetlab checkpoint (bad magic)"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &rest[len..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let values: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            let t = Array::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(entry.name, t);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: header.model,
            state: header.state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a half-written archive
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and loads every tensor. When `expected` is given
    /// and differs from the stored config, the error lists each differing
    /// field.
    pub fn restore(&self, expected: Option<&ModelConfig>) -> Result<(MiNet, ParamStore)> {
        if let Some(want) = expected {
            let diff = want.diff(&self.model);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint config mismatch (expected vs stored): {}",
                    diff.join("; ")
                )));
            }
        }
        let (net, mut store) = MiNet::build(&self.model)?;
        let map: HashMap<String, Array> = self.tensors.clone().into_iter().collect();
        let unused = store.load_named(&map, true)?;
        if !unused.is_empty() {
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", unused.join(", "))));
        }
        Ok((net, store))
    }
}
