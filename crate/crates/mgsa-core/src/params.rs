//! Named parameter storage.
//!
//! Model weights persist across steps in a [`ParamStore`] and are bound onto
//! a fresh [`Tape`] as gradient-carrying leaves at the start of every forward
//! pass. Names are hierarchical dotted paths, and the store iterates in
//! sorted name order so that binding, checkpointing, and gradient extraction
//! are all deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorId};

/// A persistent weight tensor: shape plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn from_tensor(t: Tensor) -> Self {
        Parameter { shape: t.shape, data: t.data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Parameter { shape, data: vec![0.0; numel] }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter, rejecting duplicate names.
    pub fn insert(&mut self, name: &str, param: Parameter) {
        let prev = self.entries.insert(name.to_string(), param);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn insert_tensor(&mut self, name: &str, t: Tensor) {
        self.insert(name, Parameter::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"))
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

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    /// Binds every parameter onto the tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let tensor = Tensor::new(p.shape.clone(), p.data.clone()).with_grad();
            ids.insert(name.clone(), tape.leaf(tensor));
        }
        BoundParams { ids }
    }
}

/// Tape locations of one binding of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }

    /// Collects accumulated gradients after a backward pass; parameters the
    /// loss never touched report zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let grad = match tape.grad(id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.tensor(id).numel()],
                };
                (name.clone(), grad)
            })
            .collect()
    }
}
