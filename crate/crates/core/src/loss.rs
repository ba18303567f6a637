//! Weighted depth regression loss with a surface-normal consistency term.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the normal-consistency term.
    pub alpha: f64,
    /// Per-pixel weight on transparent or reflective pixels.
    pub mask_weight: f64,
    /// Per-pixel weight everywhere else.
    pub background_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.01,
            mask_weight: 1.0,
            background_weight: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.mask_weight) || !ok(self.background_weight) {
            return Err(Error::invalid("loss_config", "alpha and weights must be finite and non-negative"));
        }
        if self.mask_weight == 0.0 && self.background_weight == 0.0 {
            return Err(Error::invalid("loss_config", "at least one pixel weight must be positive"));
        }
        Ok(())
    }

    /// Per-pixel weights: zero where the reference depth is missing.
    pub fn pixel_weights<T: Scalar>(&self, gt: &[T], mask: &[T]) -> Vec<T> {
        gt.iter()
            .zip(mask)
            .map(|(&g, &m)| {
                let w = if g.f64() <= 0.0 {
                    0.0
                } else if m.f64() > 0.5 {
                    self.mask_weight
                } else {
                    self.background_weight
                };
                T::of(w)
            })
            .collect()
    }
}

/// Finite-difference coefficients along one axis: `(lo, hi, scale)` so that
/// the derivative at `i` is `scale·(d[hi] − d[lo])`.
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        (0, 0, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// Unit normals `normalize(−∂D/∂x, −∂D/∂y, 1)` of an N×1×H×W depth map,
/// central differences inside and one-sided at the border. Output N×3×H×W.
pub fn normals_from_depth<T: Scalar>(depth: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = depth.dims4("normals_from_depth")?;
    if c != 1 {
        return Err(Error::invalid("normals_from_depth", format!("expected 1 channel, got {c}")));
    }
    let d = depth.shared();
    let plane = h * w;
    let grads = move |d: &[T], b: usize, y: usize, x: usize| -> (f64, f64) {
        let at = |yy: usize, xx: usize| d[b * plane + yy * w + xx].f64();
        let (xl, xh, sx) = stencil(x, w);
        let (yl, yh, sy) = stencil(y, h);
        (sx * (at(y, xh) - at(y, xl)), sy * (at(yh, x) - at(yl, x)))
    };
    let mut out = vec![T::zero(); n * 3 * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = grads(&d, b, y, x);
                let r = (gx * gx + gy * gy + 1.0).sqrt();
                let base = b * 3 * plane + y * w + x;
                out[base] = T::of(-gx / r);
                out[base + plane] = T::of(-gy / r);
                out[base + 2 * plane] = T::of(1.0 / r);
            }
        }
    }
    let src = d.clone();
    Tensor::from_op("normals_from_depth", vec![n, 3, h, w], out, &[depth], move |g, _| {
        let mut gd = vec![T::zero(); n * plane];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (gx, gy) = grads(&src, b, y, x);
                    let r2 = gx * gx + gy * gy + 1.0;
                    let r = r2.sqrt();
                    let base = b * 3 * plane + y * w + x;
                    let (g0, g1, g2) = (g[base].f64(), g[base + plane].f64(), g[base + 2 * plane].f64());
                    let dot = -g0 * gx - g1 * gy + g2;
                    let ggx = -g0 / r - gx * dot / (r2 * r);
                    let ggy = -g1 / r - gy * dot / (r2 * r);
                    let row = b * plane + y * w;
                    let (xl, xh, sx) = stencil(x, w);
                    gd[row + xh] = gd[row + xh] + T::of(sx * ggx);
                    gd[row + xl] = gd[row + xl] - T::of(sx * ggx);
                    let (yl, yh, sy) = stencil(y, h);
                    gd[b * plane + yh * w + x] = gd[b * plane + yh * w + x] + T::of(sy * ggy);
                    gd[b * plane + yl * w + x] = gd[b * plane + yl * w + x] - T::of(sy * ggy);
                }
            }
        }
        vec![Some(gd)]
    })
}

/// Weighted squared error plus `alpha` times the weighted normal
/// disagreement `1 − ⟨V, V*⟩`. All tensors are N×1×H×W; only `pred` is
/// differentiated.
pub fn depth_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes("depth_loss", pred.shape(), gt.shape()));
    }
    if mask.shape() != gt.shape() {
        return Err(Error::shapes("depth_loss", mask.shape(), gt.shape()));
    }
    let weights = cfg.pixel_weights(gt.data(), mask.data());
    let total: f64 = weights.iter().map(|w| w.f64()).sum();
    if total <= 0.0 {
        return Err(Error::invalid("depth_loss", "no pixel carries a positive weight"));
    }
    let weights = Tensor::new(gt.shape(), weights)?;
    let inv = T::of(1.0 / total);
    let mse = pred.sub(gt)?.square()?.mul(&weights)?.sum()?.mul_scalar(inv)?;
    if cfg.alpha == 0.0 {
        return Ok(mse);
    }
    // For unit vectors 1 − ⟨V, V*⟩ = ½‖V − V*‖², which is exactly zero when
    // the normals coincide.
    let disagreement = normals_from_depth(pred)?
        .sub(&normals_from_depth(&gt.detach())?)?
        .square()?
        .sum_axis(1)?;
    let smooth = disagreement
        .mul(&weights)?
        .sum()?
        .mul_scalar(T::of(0.5 / total))?;
    mse.add(&smooth.mul_scalar(T::of(cfg.alpha))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let v: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_f64(&[1, 1, h, w], &v).unwrap()
    }

    #[test]
    fn flat_plane_faces_the_camera() {
        let v = normals_from_depth(&map(4, 5, |_, _| 2.5)).unwrap();
        let plane = 20;
        assert!(v.data()[..2 * plane].iter().all(|&x| x == 0.0));
        assert!(v.data()[2 * plane..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn unit_ramp_tilts_forty_five_degrees() {
        let v = normals_from_depth(&map(3, 6, |_, x| x as f64)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..18 {
            assert!((v.data()[i] + s).abs() < 1e-12);
            assert!(v.data()[18 + i].abs() < 1e-12);
            assert!((v.data()[36 + i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_is_degenerate_but_defined() {
        let v = normals_from_depth(&map(1, 1, |_, _| 3.0)).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = map(5, 5, |y, x| 1.0 + 0.1 * (y * x) as f64);
        let mask = map(5, 5, |y, _| (y % 2) as f64);
        let loss = depth_loss(&gt, &gt, &mask, &LossConfig::default()).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn constant_offset_gives_squared_offset() {
        let gt = map(4, 4, |y, x| 1.0 + 0.25 * (y + x) as f64);
        let pred = gt.add_scalar(0.1).unwrap();
        let mask = map(4, 4, |y, x| ((y + x) % 2) as f64);
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert!((depth_loss(&pred, &gt, &mask, &cfg).unwrap().item() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn missing_reference_everywhere_is_an_error() {
        let zero = map(2, 2, |_, _| 0.0);
        assert!(depth_loss(&zero, &zero, &zero, &LossConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let neg = LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
        let zero = LossConfig {
            mask_weight: 0.0,
            background_weight: 0.0,
            ..LossConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}
