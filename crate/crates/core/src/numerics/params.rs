use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Matrix, Tape, Var};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Named model parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| LabError::contract(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| LabError::contract(format!("unknown parameter {name}")))?;
        p.value.ensure_same_shape(&value, "param set")?;
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total scalar count of trainable parameters whose name passes `filter`.
    pub fn count_trainable(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, p)| p.trainable && filter(n))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let doc: BTreeMap<&str, CheckpointEntry> = self
            .params
            .iter()
            .map(|(n, p)| {
                (
                    n.as_str(),
                    CheckpointEntry {
                        shape: [p.value.rows(), p.value.cols()],
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string(&doc)?)
    }

    /// Overwrites values from a checkpoint; names and shapes must match this store exactly.
    pub fn load_checkpoint_json(&mut self, text: &str) -> Result<()> {
        let doc: BTreeMap<String, CheckpointEntry> = serde_json::from_str(text)?;
        for name in self.params.keys() {
            if !doc.contains_key(name) {
                return Err(LabError::contract(format!("checkpoint lacks parameter {name}")));
            }
        }
        for (name, entry) in doc {
            let p = self
                .params
                .get_mut(&name)
                .ok_or_else(|| LabError::contract(format!("checkpoint has unexpected parameter {name}")))?;
            let [r, c] = entry.shape;
            if (r, c) != p.value.shape() {
                return Err(LabError::contract(format!(
                    "checkpoint shape {r}x{c} for {name} but model expects {}",
                    p.value.shape_str()
                )));
            }
            p.value = Matrix::from_vec(r, c, entry.values)?;
        }
        Ok(())
    }
}

/// A tape bound to a parameter store: each parameter becomes one leaf,
/// created on first use.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| LabError::contract(format!("unknown parameter {name}")))?;
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter (zeros where backward did not reach).
    pub fn grads(&self) -> BTreeMap<String, Matrix> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| {
                let g = self
                    .bound
                    .get(n)
                    .and_then(|&v| self.tape.grad(v).cloned())
                    .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()));
                (n.clone(), g)
            })
            .collect()
    }

    /// Gradients of trainable parameters that backward actually reached.
    pub fn reached_grads(&self) -> BTreeMap<String, Matrix> {
        self.bound
            .iter()
            .filter(|(n, _)| self.store.param(n).is_some_and(|p| p.trainable))
            .filter_map(|(n, &v)| self.tape.grad(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}
