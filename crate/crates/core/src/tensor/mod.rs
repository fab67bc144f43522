//! Dense tensor with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-clone handle onto a graph node. Every operation
//! allocates a fresh node holding the result values plus, when any input
//! requires gradients, a closure that routes the output gradient to the
//! inputs. `backward` on a scalar walks the graph once in reverse
//! topological order, so accumulation order is fixed by construction order
//! and runs are bit-reproducible.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod spatial;

pub use conv::ConvSpec;
pub use norm::BnMode;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::scalar::Scalar;

static NODE_IDS: AtomicU64 = AtomicU64::new(0);

type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

/// N-dimensional row-major tensor handle.
pub struct Tensor<S: Scalar> {
    inner: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        shape: Vec<usize>,
        values: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward_fn: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Node {
                id: NODE_IDS.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn,
            }),
        }
    }

    /// Result of an operation; gradients flow iff any parent requires them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<S>,
        parents: Vec<Tensor<S>>,
        make_backward: impl FnOnce() -> BackwardFn<S>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward_fn = requires_grad.then(make_backward);
        Self::new_node(shape, values, requires_grad, parents, backward_fn)
    }

    /// Leaf tensor from explicit shape and row-major values.
    pub fn from_vec(
        shape: impl Into<Vec<usize>>,
        values: Vec<S>,
    ) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::ShapeValueMismatch {
                op: "from_vec",
                shape,
                len: values.len(),
            });
        }
        Ok(Self::new_node(shape, values, false, Vec::new(), None))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: impl Into<Vec<usize>>, values: Vec<S>) -> Result<Self, TensorError> {
        let t = Self::from_vec(shape, values)?;
        Ok(Self::new_node(
            t.inner.shape.clone(),
            t.to_vec(),
            true,
            Vec::new(),
            None,
        ))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_node(shape, vec![S::zero(); numel], false, Vec::new(), None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_node(shape, vec![value; numel], false, Vec::new(), None)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_node(vec![1], vec![value], false, Vec::new(), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    pub fn values(&self) -> Ref<'_, Vec<S>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.values.borrow().clone()
    }

    /// Single element of a 1-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.inner.values.borrow()[0]
    }

    /// Replaces the stored values in place. Callers must hold exclusive
    /// logical ownership (optimizer step, checkpoint load, stat update).
    pub fn set_values(&self, values: Vec<S>) {
        assert_eq!(values.len(), self.numel(), "set_values length mismatch");
        *self.inner.values.borrow_mut() = values;
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[S]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are reset and reflect the latest call.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: self.numel(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for node in &order {
            if !node.is_leaf() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(&[S::one()]);
        for node in order.iter().rev() {
            let Some(backward_fn) = node.inner.backward_fn.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            if let Some(grad) = grad {
                backward_fn(&grad);
            }
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph; `self` comes last.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, cursor)) = stack.pop() {
            let mut advanced = false;
            for idx in cursor..node.inner.parents.len() {
                let parent = &node.inner.parents[idx];
                if parent.requires_grad() && visited.insert(parent.inner.id) {
                    stack.push((node.clone(), idx + 1));
                    stack.push((parent.clone(), 0));
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                order.push(node);
            }
        }
        order
    }
}
