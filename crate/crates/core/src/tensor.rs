use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BackwardFn, NodeId, TapeInner};

#[derive(Clone)]
pub(crate) struct Tracked<T: Scalar> {
    pub(crate) tape: Rc<TapeInner<T>>,
    pub(crate) id: NodeId,
}

/// Dense row-major tensor. Data is immutable once produced and shared
/// between clones; a tensor may additionally carry a handle to the tape
/// node that produced it.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Tracked<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .field("tracked", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a rank-4 N×C×H×W tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, l, c] => Ok((n, l, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected a rank-3 N×L×C tensor, got {:?}", self.shape),
            )),
        }
    }

    /// Copy without tape tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn tracked(&self) -> Option<&Tracked<T>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(&self, node: Tracked<T>) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(node),
        }
    }

    /// Converts to another precision. The result is untracked.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.f64())).collect()),
            node: None,
        }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    /// Builds the output of an op and, when any input is tracked, records
    /// it on the shared tape together with its backward rule.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Result<Self>
    where
        F: FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        Self::from_op_shared(op, shape, Arc::new(data), inputs, backward)
    }

    /// Like [`Tensor::from_op`] for rules that need the output buffer.
    pub(crate) fn from_op_shared<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Result<Self>
    where
        F: FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op} output");
        let mut tape: Option<Rc<TapeInner<T>>> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match &tape {
                    Some(existing) if !Rc::ptr_eq(existing, &n.tape) => {
                        return Err(Error::invalid(op, "inputs belong to different tapes"));
                    }
                    Some(_) => {}
                    None => tape = Some(n.tape.clone()),
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op,
                node: tape.as_ref().map(|t| t.next_id()),
            });
        }
        let node = match tape {
            None => None,
            Some(tape) => {
                let ids = inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect();
                let rule: BackwardFn<T> = Box::new(backward);
                let id = tape.push(op, data.len(), ids, Some(rule))?;
                Some(Tracked { tape, id })
            }
        };
        Ok(Tensor { shape, data, node })
    }
}
