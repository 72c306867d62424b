use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::rng::RngStream;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "medembed-params/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Shapes by name, in insertion order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Copies every parameter of `other` whose name exists here with the same
    /// shape. Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (_, name, value) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.get(id).shape() != value.shape() {
                    return Err(Error::Contract(format!(
                        "parameter {name}: shape {:?} cannot load {:?}",
                        self.get(id).shape(),
                        value.shape()
                    )));
                }
                *self.get_mut(id) = value.clone();
                loaded.push(name.to_string());
            }
        }
        Ok(loaded)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT.to_string(),
            params: self
                .iter()
                .map(|(_, name, t)| CheckpointEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format_version
            )));
        }
        let mut store = ParamStore::new();
        for e in &ckpt.params {
            store.insert(
                e.name.clone(),
                Tensor::new(e.shape.clone(), e.data.clone())?,
            );
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized parameter set: ordered `(name, shape, flat data)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    /// Glorot/Xavier uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(&[fan_in, fan_out], bound, rng)
    }
}
