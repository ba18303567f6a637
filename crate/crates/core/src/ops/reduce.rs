use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Result<Self> {
        let n = self.numel();
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        Self::from_op("sum", vec![1], vec![s], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::of(self.numel() as f64);
        self.sum()?.mul_scalar(T::one() / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Self::from_op("sum_axis", shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = T::of(self.shape()[axis] as f64);
        self.sum_axis(axis)?.mul_scalar(T::one() / len)
    }

    /// Maximum along `axis` (kept with extent 1). Ties route the gradient to
    /// the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        check_axis("max_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut at = 0;
                for a in 1..len {
                    let v = x[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                        at = a;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = at;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Self::from_op("max_axis", shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    gx[(o * len + arg[k]) * inner + i] = g[k];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-channel spatial mean: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool2d(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("global_avg_pool2d")?;
        self.reshape(&[n, c, h * w])?
            .mean_axis(2)?
            .reshape(&[n, c, 1, 1])
    }

    /// Per-channel spatial max: N×C×H×W → N×C×1×1.
    pub fn global_max_pool2d(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("global_max_pool2d")?;
        self.reshape(&[n, c, h * w])?
            .max_axis(2)?
            .reshape(&[n, c, 1, 1])
    }

    /// Per-pixel mean over channels: N×C×H×W → N×1×H×W.
    pub fn channel_mean(&self) -> Result<Self> {
        self.dims4("channel_mean")?;
        self.mean_axis(1)
    }

    /// Per-pixel max over channels: N×C×H×W → N×1×H×W.
    pub fn channel_max(&self) -> Result<Self> {
        self.dims4("channel_max")?;
        self.max_axis(1)
    }
}
