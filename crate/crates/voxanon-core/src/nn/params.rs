//! Named parameter registry shared by the model, optimizer, and
//! checkpoint code.
//!
//! Layers register their weights here at construction time and hold on to
//! [`ParamId`]s. For each forward pass the whole set is bound onto a
//! fresh [`Tape`] as leaves, so gradients collected after `backward` line
//! up with parameter ids by index.

use crate::nn::tape::{Tape, Var};
use crate::{Error, Result};
use ndarray::Array2;
use std::collections::BTreeMap;

/// Stable handle to one parameter matrix in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Array2<f64>,
}

/// Ordered collection of named `f64` matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a new parameter. Names must be unique; they are the
    /// stable identity used by checkpoints.
    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Entry { name: name.to_string(), value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Binds every parameter onto `tape` as a differentiable leaf. The
    /// returned vector is indexed by `ParamId::index`.
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    /// Binds every parameter as a constant: values participate in the
    /// forward pass but receive no gradient. Used when another
    /// component's parameters appear inside a loss (e.g. a frozen
    /// discriminator inside the generator objective).
    pub fn bind_all_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.constant(e.value.clone())).collect()
    }

    /// Collects per-parameter gradients after `tape.backward`, summing
    /// into `into` (indexed by `ParamId::index`). Parameters the loss
    /// never touched contribute nothing.
    pub fn accumulate_grads(&self, tape: &Tape, bound: &[Var], into: &mut [Array2<f64>]) {
        assert_eq!(bound.len(), self.entries.len());
        assert_eq!(into.len(), self.entries.len());
        for (i, &var) in bound.iter().enumerate() {
            if let Some(g) = tape.grad(var) {
                into[i] += g;
            }
        }
    }

    /// Zero-shaped gradient buffers matching every parameter.
    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect()
    }

    /// Serializes into a name-sorted map of (shape, row-major data).
    pub fn to_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| {
                let dim = e.value.dim();
                (
                    e.name.clone(),
                    (vec![dim.0, dim.1], e.value.iter().copied().collect()),
                )
            })
            .collect()
    }

    /// Overwrites parameter values from a serialized map. The map must
    /// contain exactly the registered names with matching shapes.
    pub fn load_map(&mut self, map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        if map.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                map.len(),
                self.entries.len()
            )));
        }
        for entry in &mut self.entries {
            let (shape, data) = map.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter {}", entry.name))
            })?;
            let dim = entry.value.dim();
            if shape.as_slice() != [dim.0, dim.1] || data.len() != dim.0 * dim.1 {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: checkpoint {:?}, model {:?}",
                    entry.name, shape, dim
                )));
            }
            entry.value = Array2::from_shape_vec(dim, data.clone())
                .expect("shape checked above");
        }
        Ok(())
    }
}
