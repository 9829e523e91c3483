use std::collections::BTreeMap;
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors. Iteration order is the lexicographic name order,
/// which also fixes the optimizer slot order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to vars recorded by the caller, e.g. the leaves handed out
    /// by a gradient check.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values(&self) -> Vec<&Tensor> {
        self.entries.values().collect()
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.values_mut().collect()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), tape.param(value.clone())?);
        }
        Ok(BoundParams { vars })
    }

    /// Reads the gradient of every parameter from a tape after `backward`.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Result<Vec<Tensor>> {
        self.entries
            .keys()
            .map(|name| {
                let var = bound.get(name)?;
                tape.grad(var)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("no gradient for {name}")))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.entries)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Tensor> = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for (name, t) in raw {
            let shape = t.shape().to_vec();
            let checked = Tensor::new(shape, t.into_data())
                .map_err(|e| Error::Validation(format!("checkpoint entry {name}: {e}")))?;
            entries.insert(name, checked);
        }
        Ok(ParamStore { entries })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
