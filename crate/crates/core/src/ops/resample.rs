use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bin `[start, end)` of output cell `i` when `input` cells are pooled into
/// `output` cells; bins may overlap when `output` does not divide `input`.
fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Source taps for bilinear resampling of one axis at pixel centres
/// (`align_corners = false`): `(i0, i1, weight of i1)`.
fn bilinear_taps(out: usize, input: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Adaptive average pooling of an N×C×H×W map to N×C×oh×ow.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("adaptive_avg_pool2d")?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::invalid(
                "adaptive_avg_pool2d",
                format!("cannot pool {h}×{w} to {oh}×{ow}"),
            ));
        }
        let bins: Vec<(usize, usize, usize, usize)> = (0..oh * ow)
            .map(|k| {
                let (y0, y1) = adaptive_bin(k / ow, h, oh);
                let (x0, x1) = adaptive_bin(k % ow, w, ow);
                (y0, y1, x0, x1)
            })
            .collect();
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for &(y0, y1, x0, x1) in &bins {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + plane[y * w + xx];
                    }
                }
                out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
        Self::from_op(
            "adaptive_avg_pool2d",
            vec![n, c, oh, ow],
            out,
            &[self],
            move |g, _| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut gx[p * h * w..(p + 1) * h * w];
                    for (k, &(y0, y1, x0, x1)) in bins.iter().enumerate() {
                        let share = g[p * oh * ow + k] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                plane[y * w + xx] = plane[y * w + xx] + share;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Bilinear upsampling by an integer factor, sampling at pixel centres
    /// (`align_corners = false`, edge-clamped).
    pub fn upsample_bilinear(&self, scale: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("upsample_bilinear")?;
        if scale == 0 {
            return Err(Error::invalid("upsample_bilinear", "scale must be positive"));
        }
        let (ho, wo) = (h * scale, w * scale);
        let ty = bilinear_taps(ho, h, scale);
        let tx = bilinear_taps(wo, w, scale);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                let (fy1, fy0) = (T::of(fy), T::of(1.0 - fy));
                for &(x0, x1, fx) in &tx {
                    let (fx1, fx0) = (T::of(fx), T::of(1.0 - fx));
                    let top = plane[y0 * w + x0] * fx0 + plane[y0 * w + x1] * fx1;
                    let bot = plane[y1 * w + x0] * fx0 + plane[y1 * w + x1] * fx1;
                    out.push(top * fy0 + bot * fy1);
                }
            }
        }
        Self::from_op(
            "upsample_bilinear",
            vec![n, c, ho, wo],
            out,
            &[self],
            move |g, _| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut gx[p * h * w..(p + 1) * h * w];
                    let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let (fy1, fy0) = (T::of(fy), T::of(1.0 - fy));
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let (fx1, fx0) = (T::of(fx), T::of(1.0 - fx));
                            let gv = gp[oy * wo + ox];
                            plane[y0 * w + x0] = plane[y0 * w + x0] + gv * fy0 * fx0;
                            plane[y0 * w + x1] = plane[y0 * w + x1] + gv * fy0 * fx1;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + gv * fy1 * fx0;
                            plane[y1 * w + x1] = plane[y1 * w + x1] + gv * fy1 * fx1;
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_pool_block_means() {
        let v: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = Tensor::<f64>::from_f64(&[1, 1, 4, 4], &v).unwrap();
        let y = x.adaptive_avg_pool2d(2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn adaptive_pool_fractional_bins_overlap() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[1., 2., 4.]).unwrap();
        let y = x.adaptive_avg_pool2d(1, 2).unwrap();
        // bins [0,2) and [1,3)
        assert_eq!(y.data(), &[1.5, 3.0]);
    }

    #[test]
    fn upsample_samples_pixel_centres() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[0., 4.]).unwrap();
        let y = x.upsample_bilinear(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0., 1., 3., 4.]);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 2.5);
        let y = x.upsample_bilinear(4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
