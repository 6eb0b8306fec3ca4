//! Parameter storage decoupled from the per-step computation graph.
//!
//! Parameters persist across steps in a [`ParamStore`]; a [`Session`] binds
//! them onto a fresh [`Tape`] for one forward/backward pass. Frozen
//! parameters bind as constants, so no gradient bookkeeping happens for them.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::ArrayD;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Var};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct Param<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub trainable: bool,
    // Adam state
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

/// Owns all model parameters and their optimizer state.
pub struct ParamStore<T: Scalar> {
    pub(crate) params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.params.push(Param { name: name.clone(), value, trainable: true, m, v });
        let id = ParamId(self.params.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "parameter shape change");
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Ids of all currently trainable parameters.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).map(ParamId).collect()
    }
}

/// One forward/backward pass: a tape plus lazy parameter bindings.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    train: bool,
    bound: RefCell<HashMap<usize, Var>>,
}

impl<'s, T: Scalar> Session<'s, T> {
    /// `train = false` binds every parameter as a constant (pure inference).
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Session { tape: Tape::new(), store, train, bound: RefCell::new(HashMap::new()) }
    }

    /// Bind a parameter onto the tape (cached per session).
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id.0) {
            return v;
        }
        let param = &self.store.params[id.0];
        let needs_grad = self.train && param.trainable;
        let var = self.tape.leaf(param.value.clone(), needs_grad);
        self.bound.borrow_mut().insert(id.0, var);
        var
    }

    /// Collect gradients for every bound trainable parameter.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let mut out = Vec::new();
        for (&pid, &var) in self.bound.borrow().iter() {
            if !self.store.params[pid].trainable || !self.train {
                continue;
            }
            if let Some(g) = grads.take(var) {
                out.push((ParamId(pid), g));
            }
        }
        // Deterministic update order.
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}
