use std::ops::Index;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Position of a parameter inside its [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named tensors with insertion-ordered, deterministic iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Real> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(TensorError::Params(format!("duplicate parameter name {name:?}")));
        }
        let (idx, _) = self.map.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.map.get_index_of(name).map(ParamId)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.map[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.map[id.0]
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        self.map.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.map.values_mut()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` into the entry with the same name.
    pub fn load_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Params(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, slot) in self.map.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| TensorError::Params(format!("missing parameter {name:?}")))?;
            if src.shape() != slot.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    left: slot.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *slot = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values; equal iff bit-identical.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records every parameter as a graph leaf.
    ///
    /// With `trainable == false` the leaves are constants, so nothing
    /// downstream can produce a gradient for them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .values()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParameterSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order, zero where the loss does not depend on a parameter.
    pub fn grads<T: Real>(&self, params: &ParameterSet<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|(&v, (_, p))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Real> {
    set: &'a mut ParameterSet<T>,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParameterSet<T>) -> Self {
        Self {
            set,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            set: self.set,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.set.insert(full, value)
    }
}
