//! Arena tape for reverse-mode differentiation.
//!
//! Every tensor produced during a forward pass is appended to a [`Tape`].
//! Node ids are assigned in creation order, so a node's parents always
//! have smaller ids than the node itself. Walking the arena from the loss
//! id down to zero is therefore a valid reverse topological order and
//! visits each node exactly once.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::Arc;

use super::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor<'_>> {
        self.leaf(shape, Arc::new(values), false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor<'_>> {
        self.leaf(shape, Arc::new(values), true)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.push(Vec::new(), Arc::new(vec![value]), false, None)
    }

    /// Leaf sharing an existing buffer; used to bind parameters without copying.
    pub fn shared_leaf(&self, shape: &[usize], values: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor<'_>> {
        self.leaf(shape, values, requires_grad)
    }

    fn leaf(&self, shape: &[usize], values: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor<'_>> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, None))
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            backward,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends the result of an op. The backward closure is kept only when
    /// some parent requires a gradient.
    pub(crate) fn record<F>(
        &self,
        shape: Vec<usize>,
        value: impl Into<Arc<Vec<f64>>>,
        parents: &[Tensor<'_>],
        backward: F,
    ) -> Tensor<'_>
    where
        F: Fn(&[f64], &mut GradStore) + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(shape, value.into(), requires_grad, backward)
    }

    pub(crate) fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        let mut store = GradStore {
            grads: (0..nodes.len()).map(|_| None).collect(),
            sizes: nodes.iter().map(|n| n.value.len()).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if root.requires_grad {
            store.grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            if let Some(backward) = &nodes[id].backward {
                backward(&grad, &mut store);
            }
            store.grads[id] = Some(grad);
        }
        Ok(Gradients { grads: store.grads })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Gradient accumulators used while walking the tape backwards.
pub(crate) struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    requires: Vec<bool>,
}

impl GradStore {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Mutable access to the accumulator of `id`, zero-filled on first use.
    /// Returns `None` for nodes that do not require a gradient.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.requires[id] {
            return None;
        }
        let size = self.sizes[id];
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; size]))
    }

    pub(crate) fn add(&mut self, id: usize, contrib: &[f64]) {
        if let Some(slot) = self.slot(id) {
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` was reached.
    pub fn get(&self, t: Tensor<'_>) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but zero-filled for unreachable tensors.
    pub fn get_or_zero(&self, t: Tensor<'_>) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.node(self.id).value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.tape.node(self.id).value)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.node(self.id).value.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        let node = self.tape.node(self.id);
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub fn all_finite(&self) -> bool {
        self.tape.node(self.id).value.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
