//! Reverse-mode automatic differentiation over dynamically shaped ndarray
//! tensors.
//!
//! A [`Tape`] is a single-use computation graph: leaves are pushed with
//! [`Tape::leaf`] / [`Tape::constant`], operations append nodes, and
//! [`Tape::backward`] walks the graph once in reverse. Each training step
//! builds a fresh tape; parameters live outside the tape in a
//! [`crate::nn::ParamStore`] and are bound per step.
//!
//! Gradients are only tracked through nodes whose ancestors were marked as
//! requiring gradients, so no-grad evaluation (frozen branches, difficulty
//! scoring) costs nothing extra.

mod conv;
mod ops;


use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Backward function: maps the upstream gradient to one contribution per
/// parent, in the order the parents were recorded.
type BackFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

/// Single-use computation graph.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf. `needs_grad` marks it as a differentiation root target.
    pub fn leaf(&self, value: ArrayD<T>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Vec::new(), None)
    }

    /// Record a non-differentiated leaf.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    /// Record a 0-dimensional constant.
    pub fn scalar(&self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> ArrayD<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Borrow the value of a node.
    pub fn value_ref(&self, v: Var) -> Ref<'_, ArrayD<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Extract a scalar from a 0-d or single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<T>,
        needs_grad: bool,
        parents: Vec<usize>,
        back: Option<BackFn<T>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, needs_grad, parents, back });
        Var(nodes.len() - 1)
    }

    pub(crate) fn with<R>(&self, v: Var, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    pub(crate) fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on (or that were recorded after it) have none.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        assert_eq!(root_val.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), T::one()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let Some(back) = nodes[i].back.as_ref() else { continue };
            let g = grads[i].clone().unwrap();
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), nodes[i].parents.len());
            for (&p, c) in nodes[i].parents.iter().zip(contribs) {
                if !nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
        Gradients(grads)
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Scalar>(Vec<Option<ArrayD<T>>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}
