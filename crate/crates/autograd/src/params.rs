use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::{Float, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that never receives gradients (e.g. power-iteration vectors).
    Buffer,
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
}

/// Named tensors owned by one model.
///
/// Models keep [`ParamId`]s and read values through the store, so the same
/// model description works for any element type.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a tensor. Panics on duplicate names, which is a model construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.set(id, value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>, ParamKind)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value, e.kind))
    }

    pub fn num_scalars(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn scope(&mut self, prefix: impl Into<String>) -> Scope<'_, T> {
        Scope { store: self, prefix: prefix.into() }
    }
}

/// Prefixing helper used while building models.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<T: Float> Scope<'_, T> {
    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = self.full(name);
        Scope { store: self.store, prefix }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, value, ParamKind::Buffer)
    }
}

/// Lazily places store tensors on a tape for one forward pass.
pub struct Binding<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Float> Binding<'t, 's, T> {
    /// `trainable = false` freezes every parameter (gradients still reach the inputs).
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { tape, store, vars: RefCell::new(vec![None; store.len()]), trainable }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable && self.store.kind(id) == ParamKind::Trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Binds `ids` to caller-provided vars instead of fresh leaves.
    ///
    /// Used to differentiate with respect to parameters supplied from outside,
    /// e.g. by the finite-difference checker.
    pub fn preset(&self, ids: &[ParamId], vars: &[Var<'t, T>]) {
        assert_eq!(ids.len(), vars.len(), "preset: ids and vars differ in length");
        let mut slots = self.vars.borrow_mut();
        for (&id, &v) in ids.iter().zip(vars) {
            assert_eq!(v.shape(), self.store.get(id).shape(), "preset: shape of `{}`", self.store.name(id));
            slots[id.0] = Some(v);
        }
    }

    /// Gradients of every bound trainable parameter, zeros for unused ones.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        if !self.trainable {
            return Vec::new();
        }
        let vars = self.vars.borrow();
        self.store
            .ids()
            .filter(|&id| self.store.kind(id) == ParamKind::Trainable)
            .map(|id| {
                let g = match vars[id.0] {
                    Some(v) => grads.get_or_zeros(v),
                    None => Tensor::zeros(self.store.get(id).shape().to_vec()),
                };
                (id, g)
            })
            .collect()
    }
}
