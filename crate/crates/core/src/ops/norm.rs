use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::reduce::{check_axis, split_axis};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut m = x[at(0)];
                for a in 1..len {
                    m = m.max(x[at(a)]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    z = z + e;
                }
                for a in 0..len {
                    y[at(a)] = y[at(a)] / z;
                }
            }
        }
        let y = Arc::new(y);
        let yk = y.clone();
        Self::from_op_shared("softmax", self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); yk.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dot = T::zero();
                    for a in 0..len {
                        dot = dot + g[at(a)] * yk[at(a)];
                    }
                    for a in 0..len {
                        gx[at(a)] = yk[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self) -> Result<Self> {
        let d = *self.shape().last().ok_or_else(|| Error::invalid("layer_norm", "rank 0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shapes("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / d;
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let (x, gm, bt) = (self.data(), gamma.shared(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        Self::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gxh = gr[j] * gm[j];
                            s1 = s1 + gxh;
                            s2 = s2 + gxh * xr[j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                    gx
                });
                let mut gg = needs[1].then(|| vec![T::zero(); d]);
                let mut gb = needs[2].then(|| vec![T::zero(); d]);
                for r in 0..rows {
                    for j in 0..d {
                        let gv = g[r * d + j];
                        if let Some(gg) = gg.as_mut() {
                            gg[j] = gg[j] + gv * xhat[r * d + j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] = gb[j] + gv;
                        }
                    }
                }
                vec![gx, gg, gb]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_singleton_axis_is_one() {
        let x = Tensor::<f64>::from_f64(&[3, 1], &[-5., 0., 7.]).unwrap();
        assert_eq!(x.softmax(1).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let v: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 3.0).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 4], &v).unwrap();
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            let s = y.sum_axis(axis).unwrap();
            assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[1., 2., 3., 4., -1., 0., 5., 9.]).unwrap();
        let y = x
            .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]))
            .unwrap();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
