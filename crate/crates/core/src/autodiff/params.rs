use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT: &str = "protoglyph.params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named learnable tensors, each paired with a gradient slot of the same shape.
///
/// Insertion order is preserved and is part of the checkpoint format, so two
/// stores built by the same model constructor line up index for index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Overwrites a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.require(name)?;
        let slot = &mut self.params[id.0].value;
        if !slot.same_shape(&value) {
            return Err(Error::Dimension {
                op: "set",
                lhs: slot.shape(),
                rhs: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `buffer` into the gradient slots.
    pub fn accumulate(&mut self, buffer: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            p.grad.add_assign(g);
        }
    }

    pub fn to_checkpoint(&self) -> ParamsFile {
        ParamsFile {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(file: ParamsFile) -> Result<Self> {
        if file.format != PARAMS_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format tag `{}`",
                file.format
            )));
        }
        if file.version != PARAMS_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut store = ParameterStore::new();
        for e in file.params {
            if e.shape.len() != 2 {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has rank {} (expected 2)",
                    e.name,
                    e.shape.len()
                )));
            }
            let t = Tensor::from_vec(e.shape[0], e.shape[1], e.values)
                .map_err(|_| Error::Checkpoint(format!("shape/value mismatch for `{}`", e.name)))?;
            store.insert(e.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn copy_matching(&mut self, other: &ParameterStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.get(&p.name) {
                if !src.same_shape(&p.value) {
                    return Err(Error::Dimension {
                        op: "copy_matching",
                        lhs: p.value.shape(),
                        rhs: src.shape(),
                    });
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Versioned on-disk parameter map: name → shape → values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Detached gradient accumulator with the layout of a [`ParameterStore`].
///
/// Workers backpropagate into private buffers which are then reduced in a
/// fixed order, so results do not depend on scheduling.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradBuffer {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(2, 2, vec![0.1, -1e-300, 3.5, 1.0 / 3.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::row(vec![f64::MIN_POSITIVE, 7.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        s.save(&path).unwrap();
        let back = ParameterStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["w", "b"]);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut file = ParameterStore::new().to_checkpoint();
        file.version = 99;
        assert!(matches!(
            ParameterStore::from_checkpoint(file),
            Err(Error::Checkpoint(_))
        ));
    }
}
