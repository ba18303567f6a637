//! Diagonal state-space layer with zero-order-hold discretisation, the
//! sequential selective scan, and the gated Mamba block built on it.
//!
//! Per channel `d` and state `s`, with step size `Δ` and decay `a < 0`:
//!
//! ```text
//! Ā = exp(Δ·a)
//! B̄ = ((exp(Δ·a) − 1) / a) · b        (→ Δ·b as Δ·a → 0)
//! h_t = Ā·h_{t−1} + B̄·x_t,   h_{−1} = 0
//! y_t = Σ_s c_s·h_t[s] + D·x_t
//! ```

use crate::error::{Error, Result};
use crate::nn::{Linear, Params};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this `|Δ·a|` the discretised input gain is taken as exactly `Δ·b`.
pub const ZOH_LIMIT: f64 = 1e-6;
const SERIES_LIMIT: f64 = 1e-3;

/// `φ(z) = (eᶻ − 1)/z` and `φ'(z)`, accurate through `z = 0`.
fn phi<T: Scalar>(z: T) -> (T, T) {
    let az = z.abs().f64();
    if az < ZOH_LIMIT {
        (T::one(), T::of(0.5))
    } else if az < SERIES_LIMIT {
        let (c2, c3, c4) = (T::of(0.5), T::of(1.0 / 6.0), T::of(1.0 / 24.0));
        let ph = T::one() + z * (c2 + z * (c3 + z * c4));
        let dph = c2 + z * (T::of(1.0 / 3.0) + z * (T::of(1.0 / 8.0) + z * T::of(1.0 / 30.0)));
        (ph, dph)
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (z * z.exp() - em1) / (z * z))
    }
}

/// Zero-order-hold discretisation of one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize<T: Scalar>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if !(delta > T::zero()) {
        return Err(Error::invalid("discretize", format!("step size must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), delta * b * phi(z).0))
}

/// Layout of the input/output projections handed to the scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ProjLayout {
    /// `N×L×S`: one vector per token, shared across channels (selective).
    PerToken,
    /// `D×S`: one vector per channel, shared across time (time-invariant).
    PerChannel,
}

fn proj_layout(
    name: &'static str,
    t: &[usize],
    n: usize,
    l: usize,
    d: usize,
    s: usize,
) -> Result<ProjLayout> {
    if t == [n, l, s] {
        Ok(ProjLayout::PerToken)
    } else if t == [d, s] {
        Ok(ProjLayout::PerChannel)
    } else {
        Err(Error::invalid(
            "selective_scan",
            format!("{name} has shape {t:?}; expected [{n}, {l}, {s}] or [{d}, {s}]"),
        ))
    }
}

struct ScanDims {
    n: usize,
    l: usize,
    d: usize,
    s: usize,
    b_layout: ProjLayout,
    c_layout: ProjLayout,
}

impl ScanDims {
    #[inline]
    fn proj(&self, layout: ProjLayout, bn: usize, t: usize, ch: usize) -> usize {
        match layout {
            ProjLayout::PerToken => (bn * self.l + t) * self.s,
            ProjLayout::PerChannel => ch * self.s,
        }
    }
}

fn scan_dims<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<ScanDims> {
    let (n, l, d) = x.dims3("selective_scan")?;
    if l == 0 {
        return Err(Error::invalid("selective_scan", "empty sequence"));
    }
    if delta.shape() != x.shape() {
        return Err(Error::shapes("selective_scan", x.shape(), delta.shape()));
    }
    if a.rank() != 2 || a.shape()[0] != d {
        return Err(Error::shapes("selective_scan", x.shape(), a.shape()));
    }
    if d_skip.shape() != [d] {
        return Err(Error::shapes("selective_scan", x.shape(), d_skip.shape()));
    }
    let s = a.shape()[1];
    if delta.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::invalid("selective_scan", "step sizes must be positive"));
    }
    Ok(ScanDims {
        n,
        l,
        d,
        s,
        b_layout: proj_layout("B", b.shape(), n, l, d, s)?,
        c_layout: proj_layout("C", c.shape(), n, l, d, s)?,
    })
}

/// Runs the recurrence, returning outputs `N×L×D` and the hidden states
/// laid out as `[n][d][t][s]`.
fn scan_forward<T: Scalar>(
    dims: &ScanDims,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
) -> (Vec<T>, Vec<T>) {
    let ScanDims { n, l, d, s, .. } = *dims;
    let mut y = vec![T::zero(); n * l * d];
    let mut hs = vec![T::zero(); n * d * l * s];
    let mut h = vec![T::zero(); s];
    for bn in 0..n {
        for ch in 0..d {
            h.fill(T::zero());
            for t in 0..l {
                let xi = (bn * l + t) * d + ch;
                let (xv, dl) = (x[xi], delta[xi]);
                let bo = dims.proj(dims.b_layout, bn, t, ch);
                let co = dims.proj(dims.c_layout, bn, t, ch);
                let mut acc = T::zero();
                for k in 0..s {
                    let z = dl * a[ch * s + k];
                    let abar = z.exp();
                    let bbar = dl * b[bo + k] * phi(z).0;
                    h[k] = abar * h[k] + bbar * xv;
                    acc = acc + c[co + k] * h[k];
                }
                y[xi] = acc + d_skip[ch] * xv;
                hs[((bn * d + ch) * l + t) * s..][..s].copy_from_slice(&h);
            }
        }
    }
    (y, hs)
}

/// Hidden-state trajectory `N×D×L×S` of the scan (no tape recording).
pub fn scan_states<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = scan_dims(x, delta, a, b, c, d_skip)?;
    let (_, hs) = scan_forward(&dims, x.data(), delta.data(), a.data(), b.data(), c.data(), d_skip.data());
    Tensor::new(&[dims.n, dims.d, dims.l, dims.s], hs)
}

/// Sequential selective scan over `x: N×L×D`.
///
/// `delta` is `N×L×D` and strictly positive, `a` is `D×S`, `d_skip` is `D`.
/// `b` and `c` are either `N×L×S` (input-dependent) or `D×S`
/// (time-invariant). Differentiable with respect to every input.
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = scan_dims(x, delta, a, b, c, d_skip)?;
    let (xs, ds, as_, bs, cs, dks) = (
        x.shared(),
        delta.shared(),
        a.shared(),
        b.shared(),
        c.shared(),
        d_skip.shared(),
    );
    let (y, hs) = scan_forward(&dims, &xs, &ds, &as_, &bs, &cs, &dks);
    let shape = x.shape().to_vec();
    Tensor::from_op(
        "selective_scan",
        shape,
        y,
        &[x, delta, a, b, c, d_skip],
        move |g, _needs| {
            let ScanDims { n, l, d, s, .. } = dims;
            let mut gx = vec![T::zero(); xs.len()];
            let mut gdelta = vec![T::zero(); ds.len()];
            let mut ga = vec![T::zero(); as_.len()];
            let mut gb = vec![T::zero(); bs.len()];
            let mut gc = vec![T::zero(); cs.len()];
            let mut gd = vec![T::zero(); dks.len()];
            let mut gh = vec![T::zero(); s];
            for bn in 0..n {
                for ch in 0..d {
                    gh.fill(T::zero());
                    let hbase = (bn * d + ch) * l * s;
                    for t in (0..l).rev() {
                        let xi = (bn * l + t) * d + ch;
                        let (xv, dl, gy) = (xs[xi], ds[xi], g[xi]);
                        gd[ch] = gd[ch] + gy * xv;
                        let mut gxv = gy * dks[ch];
                        let mut gdl = T::zero();
                        let bo = dims.proj(dims.b_layout, bn, t, ch);
                        let co = dims.proj(dims.c_layout, bn, t, ch);
                        for k in 0..s {
                            let h_t = hs[hbase + t * s + k];
                            let h_prev = if t > 0 { hs[hbase + (t - 1) * s + k] } else { T::zero() };
                            gc[co + k] = gc[co + k] + gy * h_t;
                            let ghk = gh[k] + gy * cs[co + k];

                            let av = as_[ch * s + k];
                            let bv = bs[bo + k];
                            let z = dl * av;
                            let e = z.exp();
                            let (ph, dph) = phi(z);
                            let g_abar = ghk * h_prev;
                            let g_bbar = ghk * xv;
                            gxv = gxv + ghk * dl * bv * ph;
                            // Ā = e^{Δa};  B̄ = b·Δ·φ(Δa)
                            gdl = gdl + g_abar * av * e + g_bbar * bv * (ph + z * dph);
                            ga[ch * s + k] = ga[ch * s + k] + g_abar * dl * e + g_bbar * bv * dl * dl * dph;
                            gb[bo + k] = gb[bo + k] + g_bbar * dl * ph;
                            gh[k] = ghk * e;
                        }
                        gx[xi] = gx[xi] + gxv;
                        gdelta[xi] = gdelta[xi] + gdl;
                    }
                }
            }
            vec![Some(gx), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    /// State size per channel.
    pub state_size: usize,
    /// Channel expansion ratio of the Mamba block.
    pub expand: usize,
    /// Width of the causal depthwise convolution.
    pub conv_kernel: usize,
    /// Input-dependent `Δ`, `B`, `C` when true; time-invariant otherwise.
    pub selective: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            state_size: 16,
            expand: 2,
            conv_kernel: 4,
            selective: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Projections {
    Selective { delta: Linear, b: Linear, c: Linear },
    Fixed { delta: ParamId, b: ParamId, c: ParamId },
}

/// State-space layer over `channels` features. `A = −exp(a_log)` keeps the
/// decay strictly negative; `a_log` starts at `ln(s + 1)`, i.e. `a_s = −(s+1)`.
#[derive(Clone, Debug)]
pub struct Ssm {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    proj: Projections,
}

impl Ssm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, cfg: &SsmConfig) -> Self {
        let s = cfg.state_size;
        let a_log = pb.from_fn("a_log", &[channels, s], |i| ((i % s) as f64 + 1.0).ln());
        let d_skip = pb.constant("d_skip", &[channels], 1.0);
        let proj = if cfg.selective {
            Projections::Selective {
                delta: Linear::new(&mut pb.sub("delta_proj"), channels, channels, true),
                b: Linear::new(&mut pb.sub("b_proj"), channels, s, false),
                c: Linear::new(&mut pb.sub("c_proj"), channels, s, false),
            }
        } else {
            Projections::Fixed {
                delta: pb.constant("delta", &[channels], 0.0),
                b: pb.uniform("b", &[channels, s], s),
                c: pb.uniform("c", &[channels, s], s),
            }
        };
        Ssm { a_log, d_skip, proj }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        let a = p[self.a_log].exp()?.neg()?;
        let (delta, b, c) = match &self.proj {
            Projections::Selective { delta, b, c } => (
                delta.forward(p, u)?.softplus()?,
                b.forward(p, u)?,
                c.forward(p, u)?,
            ),
            Projections::Fixed { delta, b, c } => (
                p[*delta].softplus()?.expand(u.shape())?,
                p[*b].clone(),
                p[*c].clone(),
            ),
        };
        selective_scan(u, &delta, &a, &b, &c, &p[self.d_skip])
    }
}

/// Gated Mamba block:
/// `out = W_down( SSM(SiLU(conv(W_up_scan·x))) ⊙ SiLU(W_up_gate·x) )`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub up_gate: Linear,
    pub up_scan: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: Ssm,
    pub down: Linear,
    pub residual: bool,
}

impl MambaBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        channels: usize,
        cfg: &SsmConfig,
        residual: bool,
    ) -> Self {
        let inner = channels * cfg.expand.max(1);
        MambaBlock {
            up_gate: Linear::new(&mut pb.sub("up_gate"), channels, inner, false),
            up_scan: Linear::new(&mut pb.sub("up_scan"), channels, inner, false),
            conv_weight: pb.uniform("conv.weight", &[inner, cfg.conv_kernel], cfg.conv_kernel),
            conv_bias: pb.constant("conv.bias", &[inner], 0.0),
            ssm: Ssm::new(&mut pb.sub("ssm"), inner, cfg),
            down: Linear::new(&mut pb.sub("down"), inner, channels, false),
            residual,
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.dims3("mamba_block")?;
        let gate = self.up_gate.forward(p, x)?.silu()?;
        let u = self
            .up_scan
            .forward(p, x)?
            .causal_conv1d(&p[self.conv_weight], &p[self.conv_bias])?
            .silu()?;
        let scanned = self.ssm.forward(p, &u)?;
        let out = self.down.forward(p, &scanned.mul(&gate)?)?;
        if self.residual {
            out.add(x)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_zero_decay_limit() {
        let (ab, bb) = discretize(0.0f64, 1.0, 1.0).unwrap();
        assert_eq!((ab, bb), (1.0, 1.0));
    }

    #[test]
    fn discretize_half_life() {
        // Closed form evaluated independently: Ā = e^{−ln 2}, B̄ = (Ā − 1)/a.
        let a = -std::f64::consts::LN_2;
        let (ab, bb) = discretize(a, 1.0, 1.0).unwrap();
        assert!((ab - 0.5).abs() < 1e-6);
        assert!((bb - 0.721348).abs() < 1e-6);
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        assert!(discretize(-1.0f64, 1.0, 0.0).is_err());
        assert!(discretize(-1.0f64, 1.0, -0.1).is_err());
    }

    #[test]
    fn phi_is_smooth_across_regimes() {
        for z in [-2e-3, -1.0001e-3, -0.9999e-3, -1e-5, 1e-5, 0.9999e-3, 1.0001e-3] {
            let (p, dp) = phi(z);
            let exact = f64::exp_m1(z) / z;
            assert!((p - exact).abs() < 1e-12, "{z}");
            let dexact = 0.5 + z / 3.0 + z * z / 8.0;
            assert!((dp - dexact).abs() < 1e-8, "{z}");
        }
    }

    #[test]
    fn scan_rejects_bad_shapes() {
        let x = Tensor::<f64>::ones(&[1, 3, 2]);
        let a = Tensor::<f64>::full(&[2, 4], -1.0);
        let b = Tensor::<f64>::ones(&[1, 3, 4]);
        let d = Tensor::<f64>::zeros(&[2]);
        assert!(selective_scan(&x, &x, &a, &b, &b, &d).is_ok());
        let wrong_b = Tensor::<f64>::ones(&[1, 2, 4]);
        assert!(selective_scan(&x, &x, &a, &wrong_b, &b, &d).is_err());
        let wrong_delta = Tensor::<f64>::ones(&[1, 2, 2]);
        assert!(selective_scan(&x, &wrong_delta, &a, &b, &b, &d).is_err());
        let neg = Tensor::<f64>::full(&[1, 3, 2], -1.0);
        assert!(selective_scan(&x, &neg, &a, &b, &b, &d).is_err());
    }
}
