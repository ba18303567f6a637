//! Named parameter storage and seeded initialisation.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; forward passes receive the
//! parameter values as a slice, so the same layer code runs on plain values,
//! on tape-tracked copies, or on perturbed copies during gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.values[id].shape(),
            value.shape(),
            "shape change for parameter {}",
            self.names[id]
        );
        self.values[id] = value.detach();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Converts every value to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix.
///
/// Weights draw from `U(−s, s)` with `s = 1/sqrt(fan_in)`; norm gains start
/// at 1, norm shifts and biases at 0.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed by `name.`.
    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-s..s))).collect();
        let t = Tensor::new(shape, data).expect("valid parameter shape");
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, Tensor::full(shape, T::of(value)))
    }

    pub fn from_fn(&mut self, name: &str, shape: &[usize], f: impl Fn(usize) -> f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| T::of(f(i))).collect();
        let full = self.full_name(name);
        self.store
            .push(full, Tensor::new(shape, data).expect("valid parameter shape"))
    }
}

/// Fresh deterministic generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
