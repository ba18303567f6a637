use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product over the last two axes. `a: […, m, k]`,
    /// `b: […, k, n]` with identical leading axes, or `b: k×n` shared by
    /// every batch entry.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (ar, br) = (self.rank(), other.rank());
        if ar < 2 || br < 2 {
            return Err(Error::shapes("matmul", self.shape(), other.shape()));
        }
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (k2, n) = (other.shape()[br - 2], other.shape()[br - 1]);
        let shared_b = br == 2;
        if k != k2 || (!shared_b && self.shape()[..ar - 2] != other.shape()[..br - 2]) {
            return Err(Error::shapes("matmul", self.shape(), other.shape()));
        }
        let batch: usize = self.shape()[..ar - 2].iter().product();
        let (a, b) = (self.shared(), other.shared());
        let b_off = |i: usize| if shared_b { 0 } else { i * k * n };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                &b[b_off(i)..b_off(i) + k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = self.shape()[..ar - 2].to_vec();
        shape.extend([m, n]);
        let b_len = b.len();
        Self::from_op("matmul", shape, out, &[self, other], move |g, needs| {
            let b_off = |i: usize| if shared_b { 0 } else { i * k * n };
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        &b[b_off(i)..b_off(i) + k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); b_len];
                for i in 0..batch {
                    let off = b_off(i);
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[off..off + k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last axis: `x · W + b` with `W: in×out`.
    pub fn linear(&self, weight: &Self, bias: Option<&Self>) -> Result<Self> {
        let rank = self.rank();
        if rank == 0 || weight.rank() != 2 || weight.shape()[0] != self.shape()[rank - 1] {
            return Err(Error::shapes("linear", self.shape(), weight.shape()));
        }
        let (din, dout) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shapes("linear", weight.shape(), b.shape()));
            }
        }
        let rows = self.numel() / din;
        let (x, w) = (self.shared(), weight.shared());
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm_nn(rows, din, dout, &x, &w, &mut out);
        let mut shape = self.shape().to_vec();
        shape[rank - 1] = dout;

        let bias_t = bias.cloned();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias_t.as_ref() {
            inputs.push(b);
        }
        Self::from_op("linear", shape, out, &inputs, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * din];
                gemm_nt(rows, dout, din, g, &w, &mut gx);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); din * dout];
                gemm_tn(din, rows, dout, &x, g, &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a = *a + b;
                        }
                    }
                    gb
                }));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 2.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[1., 4., 3., 8.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }
}
