use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    /// A context in which no parameter is differentiable.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::new(params, &[])
    }

    pub fn new(params: &'p ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; params.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self {
            tape: Tape::new(),
            params,
            trainable: mask,
            bound: vec![None; params.len()],
        }
    }

    /// The tape variable for a parameter, recording it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.params.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of trainable parameters that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter(|(i, _)| self.trainable[*i])
            .filter_map(|(i, v)| {
                v.and_then(|v| grads.get(v))
                    .map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}
