use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shapes(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let off = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 && out[i + off] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output offset together with the matching offsets in two
/// broadcast inputs, in row-major output order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * last;
        for j in 0..last {
            f(base + j, ia + j * la, ib + j * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Self,
        op: &'static str,
        f: fn(T, T) -> T,
        dfa: fn(T, T) -> T,
        dfb: fn(T, T) -> T,
    ) -> Result<Self> {
        let out_shape = broadcast_shape(op, self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let (a, b) = (self.shared(), other.shared());
        let mut out = vec![T::zero(); n];
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(a[i], b[j]));
        let shape = out_shape.clone();
        Self::from_op(op, out_shape, out, &[self, other], move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); a.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); b.len()]);
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| {
                if let Some(ga) = ga.as_mut() {
                    ga[i] = ga[i] + g[o] * dfa(a[i], b[j]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] = gb[j] + g[o] * dfb(a[i], b[j]);
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise map with a derivative expressed through input and output.
    pub(crate) fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> Result<Self>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let x = self.shared();
        let y = Arc::new(x.iter().map(|&v| f(v)).collect::<Vec<_>>());
        let yk = y.clone();
        Self::from_op_shared(op, self.shape().to_vec(), y, &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(x.iter().zip(yk.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add_scalar(&self, c: T) -> Result<Self> {
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Result<Self> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    /// `c − x`.
    pub fn rsub_scalar(&self, c: T) -> Result<Self> {
        self.unary("rsub_scalar", move |x| c - x, |_, _| -T::one())
    }

    pub fn neg(&self) -> Result<Self> {
        self.mul_scalar(-T::one())
    }

    pub fn square(&self) -> Result<Self> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Self> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Self> {
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            },
        )
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&self) -> Result<Self> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Identity in the forward pass with a backward rule that doubles the
    /// gradient. Only used to prove the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn faulty_identity(&self) -> Result<Self> {
        self.unary("faulty_identity", |x| x, |_, _| T::of(2.0))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
