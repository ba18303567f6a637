use crate::error::{Error, Result};
use crate::ops::elementwise::{broadcast_shape, broadcast_strides, for_each_broadcast};
use crate::ops::reduce::{check_axis, split_axis};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `dst[o] = src[map(o)]` where `map` walks `src` with the given strides in
/// the row-major order of `out_shape`.
fn strided_gather<T: Scalar>(src: &[T], out_shape: &[usize], strides: &[usize]) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, strides, &zeros, |_, i, _| out.push(src[i]));
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shapes("reshape", self.shape(), shape));
        }
        let data = self.shared();
        Self::from_op_shared("reshape", shape.to_vec(), data, &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let out = strided_gather(self.data(), &out_shape, &gather);

        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let in_shape = self.shape().to_vec();
        let out_strides = contiguous_strides(&out_shape);
        Self::from_op("permute", out_shape, out, &[self], move |g, _| {
            let back: Vec<usize> = inverse.iter().map(|&i| out_strides[i]).collect();
            vec![Some(strided_gather(g, &in_shape, &back))]
        })
    }

    /// Broadcasts to `shape` (numpy rules).
    pub fn expand(&self, shape: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape("expand", self.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::shapes("expand", self.shape(), shape));
        }
        let strides = broadcast_strides(self.shape(), &out_shape);
        let out = strided_gather(self.data(), &out_shape, &strides);
        let len = self.numel();
        let zeros = vec![0; out_shape.len()];
        let shape_k = out_shape.clone();
        Self::from_op("expand", out_shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); len];
            for_each_broadcast(&shape_k, &strides, &zeros, |o, i, _| gx[i] = gx[i] + g[o]);
            vec![Some(gx)]
        })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && (0..first.rank()).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shapes("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Self::from_op("concat", shape, out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis("slice", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Self::from_op("slice", shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Selects entries `indices` along `axis` (repetition allowed). The
    /// backward rule scatter-adds into the source positions.
    pub fn gather_axis(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        check_axis("gather_axis", self.shape(), axis)?;
        let (outer, full, inner) = split_axis(self.shape(), axis);
        if indices.is_empty() || indices.iter().any(|&i| i >= full) {
            return Err(Error::invalid(
                "gather_axis",
                format!("indices must be non-empty and below {full}"),
            ));
        }
        let idx = indices.to_vec();
        let k = idx.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in &idx {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = k;
        Self::from_op("gather_axis", shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                for (j, &i) in idx.iter().enumerate() {
                    let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    let dst = &mut gx[(o * full + i) * inner..(o * full + i + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Cyclic shift along `axis`: output index `i` reads input `(i − shift) mod n`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Self> {
        check_axis("roll", self.shape(), axis)?;
        let n = self.shape()[axis] as isize;
        let idx: Vec<usize> = (0..n).map(|i| (i - shift).rem_euclid(n) as usize).collect();
        self.gather_axis(axis, &idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn roll_shifts_cyclically() {
        let x = Tensor::<f64>::from_f64(&[1, 4], &[0., 1., 2., 3.]).unwrap();
        assert_eq!(x.roll(1, 1).unwrap().data(), &[3., 0., 1., 2.]);
        assert_eq!(x.roll(1, -1).unwrap().data(), &[1., 2., 3., 0.]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1, 2], &[5., 6.]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert!(c.slice(1, 0, 2).unwrap().bit_eq(&a));
        assert!(c.slice(1, 2, 1).unwrap().bit_eq(&b));
    }

    #[test]
    fn expand_broadcasts_rows() {
        let x = Tensor::<f64>::from_f64(&[2, 1], &[1., 2.]).unwrap();
        let y = x.expand(&[2, 3]).unwrap();
        assert_eq!(y.data(), &[1., 1., 1., 2., 2., 2.]);
        assert!(x.expand(&[3, 3]).is_err());
    }
}
