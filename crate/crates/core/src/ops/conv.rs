use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Unfolds channels `[c0, c0 + cn)` of one image into a `(cn·kh·kw) × (ho·wo)` matrix.
fn im2col<T: Scalar>(img: &[T], g: &Geom, c0: usize, cn: usize, col: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..cn {
        let plane = &img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the column matrix back into the image.
fn col2im<T: Scalar>(col: &[T], g: &Geom, c0: usize, cn: usize, img: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..cn {
        let plane = &mut img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((c * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let p = iy as usize * g.w + ix as usize;
                            plane[p] = plane[p] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation. `self: N×Cin×H×W`, `weight: Cout×(Cin/groups)×kh×kw`,
    /// optional `bias: Cout`. Depthwise convolution is `groups = Cin = Cout`.
    pub fn conv2d(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = self.dims4("conv2d")?;
        let (cout, cin_g, kh, kw) = weight.dims4("conv2d")?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shapes("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shapes("conv2d", weight.shape(), b.shape()));
            }
        }
        let (ho, wo) = match (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(w, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {kh}×{kw} (stride {stride}, pad {pad}) does not fit {h}×{w}"),
                ))
            }
        };
        let geom = Geom {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let cout_g = cout / groups;
        let kdim = cin_g * kh * kw;
        let hw = ho * wo;
        let (x, wt) = (self.shared(), weight.shared());
        let bias_v = bias.map(|b| b.to_vec());

        let items: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|b| {
                let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
                let mut out = vec![T::zero(); cout * hw];
                if let Some(bv) = &bias_v {
                    for (o, row) in out.chunks_mut(hw).enumerate() {
                        row.fill(bv[o]);
                    }
                }
                let mut col = vec![T::zero(); kdim * hw];
                for gi in 0..groups {
                    im2col(img, &geom, gi * cin_g, cin_g, &mut col);
                    gemm_nn(
                        cout_g,
                        kdim,
                        hw,
                        &wt[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                        &col,
                        &mut out[gi * cout_g * hw..(gi + 1) * cout_g * hw],
                    );
                }
                out
            })
            .collect();
        let out = items.concat();

        let bias_t = bias.cloned();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias_t.as_ref() {
            inputs.push(b);
        }
        let w_len = wt.len();
        Self::from_op("conv2d", vec![n, cout, ho, wo], out, &inputs, move |g, needs| {
            let (need_x, need_w) = (needs[0], needs[1]);
            type Grads<T> = (Option<Vec<T>>, Option<Vec<T>>);
            let per_item: Vec<Grads<T>> = (0..n)
                .into_par_iter()
                .map(|b| {
                    let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
                    let gout = &g[b * cout * hw..(b + 1) * cout * hw];
                    let mut gx = need_x.then(|| vec![T::zero(); cin * h * w]);
                    let mut gw = need_w.then(|| vec![T::zero(); w_len]);
                    let mut col = vec![T::zero(); kdim * hw];
                    for gi in 0..groups {
                        let go = &gout[gi * cout_g * hw..(gi + 1) * cout_g * hw];
                        let wg = &wt[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                        if let Some(gw) = gw.as_mut() {
                            im2col(img, &geom, gi * cin_g, cin_g, &mut col);
                            gemm_nt(
                                cout_g,
                                hw,
                                kdim,
                                go,
                                &col,
                                &mut gw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            col.fill(T::zero());
                            gemm_tn(kdim, cout_g, hw, wg, go, &mut col);
                            col2im(&col, &geom, gi * cin_g, cin_g, gx);
                        }
                    }
                    (gx, gw)
                })
                .collect();
            let mut gx_all = need_x.then(|| Vec::with_capacity(n * cin * h * w));
            let mut gw_all = need_w.then(|| vec![T::zero(); w_len]);
            for (gx, gw) in per_item {
                if let (Some(all), Some(part)) = (gx_all.as_mut(), gx) {
                    all.extend_from_slice(&part);
                }
                if let (Some(all), Some(part)) = (gw_all.as_mut(), gw) {
                    for (a, p) in all.iter_mut().zip(part) {
                        *a = *a + p;
                    }
                }
            }
            let mut grads = vec![gx_all, gw_all];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for b in 0..n {
                        for (o, gb) in gb.iter_mut().enumerate() {
                            let row = &g[(b * cout + o) * hw..(b * cout + o + 1) * hw];
                            *gb = row.iter().fold(*gb, |a, &v| a + v);
                        }
                    }
                    gb
                }));
            }
            grads
        })
    }

    /// Causal depthwise convolution along the sequence axis of an N×L×C
    /// tensor. `weight: C×k`, `bias: C`; the sequence is left-padded with
    /// `k − 1` zeros so output step `t` sees inputs `t−k+1 ..= t`.
    pub fn causal_conv1d(&self, weight: &Self, bias: &Self) -> Result<Self> {
        let (n, l, c) = self.dims3("causal_conv1d")?;
        if weight.rank() != 2 || weight.shape()[0] != c {
            return Err(Error::shapes("causal_conv1d", self.shape(), weight.shape()));
        }
        if bias.shape() != [c] {
            return Err(Error::shapes("causal_conv1d", weight.shape(), bias.shape()));
        }
        let k = weight.shape()[1];
        let (x, wt, bs) = (self.shared(), weight.shared(), bias.shared());
        let mut out = vec![T::zero(); n * l * c];
        for b in 0..n {
            for t in 0..l {
                for ch in 0..c {
                    let mut acc = bs[ch];
                    for j in 0..k {
                        let src = t as isize - (k - 1 - j) as isize;
                        if src >= 0 {
                            acc = acc + wt[ch * k + j] * x[(b * l + src as usize) * c + ch];
                        }
                    }
                    out[(b * l + t) * c + ch] = acc;
                }
            }
        }
        Self::from_op(
            "causal_conv1d",
            vec![n, l, c],
            out,
            &[self, weight, bias],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); n * l * c]);
                let mut gw = needs[1].then(|| vec![T::zero(); c * k]);
                let mut gb = needs[2].then(|| vec![T::zero(); c]);
                for b in 0..n {
                    for t in 0..l {
                        for ch in 0..c {
                            let go = g[(b * l + t) * c + ch];
                            if let Some(gb) = gb.as_mut() {
                                gb[ch] = gb[ch] + go;
                            }
                            for j in 0..k {
                                let src = t as isize - (k - 1 - j) as isize;
                                if src < 0 {
                                    continue;
                                }
                                let xi = (b * l + src as usize) * c + ch;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] = gx[xi] + go * wt[ch * k + j];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[ch * k + j] = gw[ch * k + j] + go * x[xi];
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            },
        )
    }

    /// Max pooling with implicit −∞ padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("max_pool2d")?;
        let (ho, wo) = match (
            conv_out_extent(h, kernel, stride, pad),
            conv_out_extent(w, kernel, stride, pad),
        ) {
            (Some(a), Some(b)) if pad < kernel => (a, b),
            _ => {
                return Err(Error::invalid(
                    "max_pool2d",
                    format!("window {kernel} (stride {stride}, pad {pad}) does not fit {h}×{w}"),
                ))
            }
        };
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                at = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(p * h * w + at);
                }
            }
        }
        let len = self.numel();
        Self::from_op("max_pool2d", vec![n, c, ho, wo], out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); len];
            for (&i, &gv) in arg.iter().zip(g) {
                gx[i] = gx[i] + gv;
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_arithmetic() {
        for input in 1..20 {
            for k in 1..6 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let got = conv_out_extent(input, k, stride, pad);
                        if input + 2 * pad >= k {
                            assert_eq!(got, Some((input + 2 * pad - k) / stride + 1));
                        } else {
                            assert_eq!(got, None);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_grid_matches_formula() {
        for (input, k, stride, pad) in [(8, 3, 1, 1), (9, 3, 2, 1), (16, 7, 2, 3), (8, 4, 4, 0), (5, 1, 1, 0)] {
            let x = Tensor::<f64>::ones(&[1, 2, input, input]);
            let w = Tensor::<f64>::ones(&[3, 2, k, k]);
            let y = x.conv2d(&w, None, stride, pad, 1).unwrap();
            let e = (input + 2 * pad - k) / stride + 1;
            assert_eq!(y.shape(), &[1, 3, e, e]);
        }
    }

    #[test]
    fn depthwise_centered_identity_kernel_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 5, 4], &data).unwrap();
        let mut k = vec![0.0; 3 * 9];
        for c in 0..3 {
            k[c * 9 + 4] = 1.0;
        }
        let w = Tensor::<f64>::from_f64(&[3, 1, 3, 3], &k).unwrap();
        let y = x.conv2d(&w, None, 1, 1, 3).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn causal_conv_ignores_future_steps() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 1], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 2], &[1., 10.]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = x.causal_conv1d(&w, &b).unwrap();
        assert_eq!(y.data(), &[10., 21., 32., 43.]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 4., 3., 2.]).unwrap();
        let y = x.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.]);
    }
}
