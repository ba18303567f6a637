//! Reverse-mode gradient tape.
//!
//! Every op whose inputs include a tracked tensor appends a node holding the
//! ids of its tracked inputs and a one-shot backward rule. Node ids are
//! assigned in recording order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Tracked};

pub type NodeId = usize;

/// Backward rule of a recorded op. Receives the output gradient and, per
/// input position, whether that input needs a gradient. Returns one entry
/// per input position.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    len: usize,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

pub(crate) struct TapeInner<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<HashMap<NodeId, Arc<Vec<T>>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> TapeInner<T> {
    pub(crate) fn push(
        self: &Rc<Self>,
        op: &'static str,
        len: usize,
        inputs: Vec<Option<NodeId>>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<NodeId> {
        if self.consumed.get() {
            return Err(Error::invalid(op, "tape already consumed by backward()"));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            len,
            inputs,
            backward,
        });
        Ok(nodes.len() - 1)
    }

    pub(crate) fn next_id(&self) -> NodeId {
        self.nodes.borrow().len()
    }
}

/// Records differentiable operations for one forward pass.
///
/// `backward` may run once per tape; a second call is an error instead of
/// silently accumulating into the same gradients.
pub struct Tape<T: Scalar> {
    inner: Rc<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                grads: RefCell::new(HashMap::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Registers `t` as a gradient-requiring leaf and returns the tracked
    /// handle. The data buffer is shared, not copied.
    pub fn watch(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let id = self.inner.push("leaf", t.numel(), Vec::new(), None)?;
        Ok(t.with_node(Tracked {
            tape: self.inner.clone(),
            id,
        }))
    }

    pub fn watch_all(&self, ts: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        ts.iter().map(|t| self.watch(t)).collect()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.inner.next_id()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.consumed.get()
    }

    fn owns(&self, t: &Tensor<T>) -> Option<NodeId> {
        t.tracked()
            .filter(|n| Rc::ptr_eq(&n.tape, &self.inner))
            .map(|n| n.id)
    }

    /// Propagates d(loss)/d(node) to every leaf reachable from `loss`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self
            .owns(loss)
            .ok_or_else(|| Error::Backward("loss was not recorded on this tape".into()))?;
        if self.inner.consumed.replace(true) {
            return Err(Error::Backward("backward() already ran on this tape".into()));
        }

        let mut nodes = self.inner.nodes.borrow_mut();
        let mut pending: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        pending[root] = Some(vec![T::one()]);
        let mut leaf_grads = HashMap::new();

        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            debug_assert_eq!(grad.len(), node.len, "{} gradient length", node.op);
            let Some(rule) = node.backward.take() else {
                if node.inputs.is_empty() {
                    leaf_grads.insert(id, Arc::new(grad));
                }
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let op = node.op;
            let input_grads = rule(&grad, &needs);
            let inputs = node.inputs.clone();
            for (slot, g) in inputs.iter().zip(input_grads) {
                let (Some(parent), Some(g)) = (slot, g) else {
                    continue;
                };
                match &mut pending[*parent] {
                    Some(acc) => {
                        if acc.len() != g.len() {
                            return Err(Error::Backward(format!(
                                "{op}: gradient length {} does not match input length {}",
                                g.len(),
                                acc.len()
                            )));
                        }
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    empty => *empty = Some(g),
                }
            }
        }
        // Release backward closures and the buffers they captured.
        nodes.clear();
        *self.inner.grads.borrow_mut() = leaf_grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to a watched leaf.
    /// `None` when the leaf was unreachable from the loss or not on this tape.
    pub fn grad(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let id = self.owns(t)?;
        let grads = self.inner.grads.borrow();
        let g = grads.get(&id)?;
        Some(Tensor::from_shared(t.shape().to_vec(), g.clone()))
    }
}
