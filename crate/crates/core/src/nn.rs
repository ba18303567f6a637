//! Parameterised building blocks shared by the network modules.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter values indexed by [`ParamId`].
pub type Params<'a, T> = &'a [Tensor<T>];

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: pb.uniform("weight", &[din, dout], din),
            bias: bias.then(|| pb.constant("bias", &[dout], 0.0)),
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&p[self.weight], self.bias.map(|b| &p[b]))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::grouped(pb, cin, cout, kernel, stride, pad, 1)
    }

    /// Depthwise `kernel × kernel` convolution that keeps the spatial extent.
    pub fn depthwise<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, kernel: usize) -> Self {
        Self::grouped(pb, channels, channels, kernel, 1, kernel / 2, channels)
    }

    pub fn grouped<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        Conv2d {
            weight: pb.uniform("weight", &[cout, cin / groups, kernel, kernel], fan_in),
            bias: Some(pb.constant("bias", &[cout], 0.0)),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(
            &p[self.weight],
            self.bias.map(|b| &p[b]),
            self.stride,
            self.pad,
            self.groups,
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.constant("gamma", &[dim], 1.0),
            beta: pb.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&p[self.gamma], &p[self.beta])
    }
}

/// Multi-head scaled dot-product self-attention over N×L×C token sets.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(
                "multi_head_attention",
                format!("{dim} channels are not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&mut pb.sub("q"), dim, dim, true),
            k: Linear::new(&mut pb.sub("k"), dim, dim, true),
            v: Linear::new(&mut pb.sub("v"), dim, dim, true),
            out: Linear::new(&mut pb.sub("out"), dim, dim, true),
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: Params<T>,
        x: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, x, mask)?.0)
    }

    /// Returns the attended output and the N×heads×L×L attention weights.
    /// `mask`, when given, is added to the logits and must broadcast to
    /// N×1×L×L.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        p: Params<T>,
        x: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, l, c) = x.dims3("multi_head_attention")?;
        if c % self.heads != 0 {
            return Err(Error::invalid(
                "multi_head_attention",
                format!("{c} channels are not divisible by {} heads", self.heads),
            ));
        }
        let d = c / self.heads;
        let split = |t: Tensor<T>, perm: &[usize]| -> Result<Tensor<T>> {
            t.reshape(&[n, l, self.heads, d])?.permute(perm)
        };
        let q = split(self.q.forward(p, x)?, &[0, 2, 1, 3])?;
        let kt = split(self.k.forward(p, x)?, &[0, 2, 3, 1])?;
        let v = split(self.v.forward(p, x)?, &[0, 2, 1, 3])?;
        let mut logits = q.matmul(&kt)?.mul_scalar(T::of(1.0 / (d as f64).sqrt()))?;
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        let attn = logits.softmax(3)?;
        let ctx = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, c])?;
        Ok((self.out.forward(p, &ctx)?, attn))
    }
}
