//! Decoder built from multi-scale fusion modules (MSFM) and a residual depth
//! head.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Params};
use crate::params::ParamBuilder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHUFFLE_GROUPS: usize = 2;

/// Pools `x` down to `h×w` and tiles its channel block up to `channels`.
pub fn align<T: Scalar>(x: &Tensor<T>, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, c, xh, xw) = x.dims4("align")?;
    if !channels.is_multiple_of(c) {
        return Err(Error::invalid(
            "align",
            format!("{channels} channels are not a multiple of {c}"),
        ));
    }
    if h > xh || w > xw {
        return Err(Error::invalid(
            "align",
            format!("cannot pool {xh}×{xw} up to {h}×{w}"),
        ));
    }
    let pooled = if (h, w) == (xh, xw) {
        x.clone()
    } else {
        x.adaptive_avg_pool2d(h, w)?
    };
    let k = channels / c;
    if k == 1 {
        return Ok(pooled);
    }
    let copies: Vec<&Tensor<T>> = std::iter::repeat_n(&pooled, k).collect();
    Tensor::concat(&copies, 1)
}

/// Source channel for each output slot of a `groups`-way shuffle.
pub fn shuffle_indices(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|p| (p % groups) * per + p / groups).collect()
}

/// Group-transpose channel permutation: channel `q·(C/g) + r` moves to `r·g + q`.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("channel_shuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{groups} groups do not divide {c} channels"),
        ));
    }
    x.gather_axis(1, &shuffle_indices(c, groups))
}

/// 7×7 convolution over the per-pixel channel max and mean.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>) -> Self {
        SpatialAttention {
            conv: Conv2d::new(&mut pb.sub("conv"), 2, 1, 7, 1, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = Tensor::concat(&[&x.channel_max()?, &x.channel_mean()?], 1)?;
        self.conv.forward(p, &pooled)
    }
}

/// Squeeze-and-excite style bottleneck on the spatial mean.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::invalid(
                "channel_attention",
                format!("{channels} channels are not divisible by squeeze ratio {ratio}"),
            ));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            squeeze: Conv2d::new(&mut pb.sub("squeeze"), channels, hidden, 1, 1, 0),
            expand: Conv2d::new(&mut pb.sub("expand"), hidden, channels, 1, 1, 0),
        })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.squeeze.forward(p, &x.global_avg_pool2d()?)?.relu()?;
        self.expand.forward(p, &h)
    }
}

/// Gated blend of a deep decoder feature with an aligned shallower skip.
#[derive(Clone, Debug)]
pub struct Msfm {
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
    pub dw3: Conv2d,
    pub dw7: Conv2d,
    pub reduce: Conv2d,
    pub out_deep: Conv2d,
    pub out_skip: Conv2d,
    pub channels: usize,
}

impl Msfm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, squeeze_ratio: usize) -> Result<Self> {
        let wide = 2 * channels;
        Ok(Msfm {
            spatial: SpatialAttention::new(&mut pb.sub("spatial")),
            channel: ChannelAttention::new(&mut pb.sub("channel"), channels, squeeze_ratio)?,
            dw3: Conv2d::depthwise(&mut pb.sub("dw3"), wide, 3),
            dw7: Conv2d::depthwise(&mut pb.sub("dw7"), wide, 7),
            reduce: Conv2d::new(&mut pb.sub("reduce"), wide, channels, 1, 1, 0),
            out_deep: Conv2d::new(&mut pb.sub("out_deep"), channels, channels, 1, 1, 0),
            out_skip: Conv2d::new(&mut pb.sub("out_skip"), channels, channels, 1, 1, 0),
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, deep: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_gate(p, deep, skip)?.0)
    }

    /// Also returns the sigmoid gate applied to the deep input.
    pub fn forward_with_gate<T: Scalar>(
        &self,
        p: Params<T>,
        deep: &Tensor<T>,
        skip: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (_, c, h, w) = deep.dims4("msfm")?;
        if c != self.channels {
            return Err(Error::invalid(
                "msfm",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let aligned = align(skip, c, h, w)?;
        let x = deep.add(&aligned)?;
        let attn = self.spatial.forward(p, &x)?.add(&self.channel.forward(p, &x)?)?;
        let mixed = channel_shuffle(&Tensor::concat(&[&attn, &x], 1)?, SHUFFLE_GROUPS)?;
        let multi = self.dw3.forward(p, &mixed)?.add(&self.dw7.forward(p, &mixed)?)?;
        let gate = self.reduce.forward(p, &multi)?.sigmoid()?;
        let keep = self.out_deep.forward(p, &gate.mul(deep)?)?;
        let blend = self.out_skip.forward(p, &gate.rsub_scalar(T::one())?.mul(&aligned)?)?;
        Ok((keep.add(&blend)?, gate))
    }
}

/// Upsample ×2, 3×3 conv to the skip width and ReLU, then fuse with the skip.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv: Conv2d,
    pub msfm: Option<Msfm>,
}

impl DecoderStage {
    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(p, &x.upsample_bilinear(2)?)?.relu()?;
        match &self.msfm {
            Some(m) => m.forward(p, &y, skip),
            None => {
                let (_, c, h, w) = y.dims4("decoder_stage")?;
                y.add(&align(skip, c, h, w)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
}

impl Decoder {
    /// `skip_widths` are the encoder widths from shallow to deep, excluding
    /// the bottleneck.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        skip_widths: &[usize],
        bottleneck_width: usize,
        msfm: bool,
        squeeze_ratio: usize,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(skip_widths.len());
        let mut cin = bottleneck_width;
        for (i, &c) in skip_widths.iter().enumerate().rev() {
            let mut sub = pb.sub(format!("stage{}", i + 1));
            let conv = Conv2d::new(&mut sub.sub("conv"), cin, c, 3, 1, 1);
            let msfm = if msfm {
                Some(Msfm::new(&mut sub.sub("msfm"), c, squeeze_ratio)?)
            } else {
                None
            };
            stages.push(DecoderStage { conv, msfm });
            cin = c;
        }
        let head_conv = Conv2d::new(&mut pb.sub("head.conv"), cin, cin, 3, 1, 1);
        // A zero output layer makes the untrained network return its input depth.
        let mut out = pb.sub("head.out");
        let head_out = Conv2d {
            weight: out.constant("weight", &[1, cin, 1, 1], 0.0),
            bias: Some(out.constant("bias", &[1], 0.0)),
            stride: 1,
            pad: 0,
            groups: 1,
        };
        Ok(Decoder {
            stages,
            head_conv,
            head_out,
        })
    }

    /// Residual depth map at `upscale ×` the shallowest skip resolution.
    /// `skips` are ordered shallow to deep.
    pub fn forward<T: Scalar>(
        &self,
        p: Params<T>,
        skips: &[Tensor<T>],
        bottleneck: &Tensor<T>,
        upscale: usize,
    ) -> Result<Tensor<T>> {
        if skips.len() != self.stages.len() {
            return Err(Error::invalid(
                "decode",
                format!("expected {} skips, got {}", self.stages.len(), skips.len()),
            ));
        }
        let mut x = bottleneck.clone();
        for (stage, skip) in self.stages.iter().zip(skips.iter().rev()) {
            x = stage.forward(p, &x, skip)?;
        }
        let x = self.head_conv.forward(p, &x.upsample_bilinear(upscale)?)?.relu()?;
        self.head_out.forward(p, &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamStore};

    fn wavy(shape: &[usize], phase: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.61 + phase).sin()).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    fn build<M>(f: impl FnOnce(&mut ParamBuilder<f64>) -> Result<M>) -> (M, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(5);
        let m = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (m, store)
    }

    #[test]
    fn align_identity_tiling_and_pooling() {
        let x = wavy(&[1, 2, 4, 4], 0.0);
        assert!(align(&x, 2, 4, 4).unwrap().bit_eq(&x));
        let tiled = align(&x, 4, 4, 4).unwrap();
        assert_eq!(&tiled.data()[..16], &x.data()[..16]);
        assert_eq!(&tiled.data()[32..48], &x.data()[..16]);
        assert_eq!(&tiled.data()[48..], &x.data()[16..]);
        let plane: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let pooled = align(&Tensor::<f64>::from_f64(&[1, 1, 4, 4], &plane).unwrap(), 1, 2, 2).unwrap();
        assert_eq!(pooled.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(align(&x, 3, 4, 4).is_err());
        assert!(align(&x, 2, 8, 8).is_err());
    }

    #[test]
    fn shuffle_matches_reshape_transpose() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_shuffle(&x, 2).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let y = wavy(&[2, 6, 2, 3], 0.2);
        let back = channel_shuffle(&channel_shuffle(&y, 2).unwrap(), 3).unwrap();
        assert!(back.bit_eq(&y));
        assert!(channel_shuffle(&y, 4).is_err());
    }

    #[test]
    fn spatial_attention_is_flat_on_constant_input() {
        let (sa, store) = build(|pb| Ok(SpatialAttention::new(pb)));
        let y = sa.forward(store.values(), &Tensor::full(&[1, 5, 9, 9], 0.7)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 9, 9]);
        // Zero padding only reaches three pixels in; the interior must be flat.
        let centre = y.data()[4 * 9 + 4];
        for r in 3..6 {
            for c in 3..6 {
                assert!((y.data()[r * 9 + c] - centre).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_attention_ignores_pixel_order() {
        let (ca, store) = build(|pb| ChannelAttention::new(pb, 8, 4));
        let x = wavy(&[1, 8, 3, 3], 0.1);
        let flipped = x.roll(2, 1).unwrap().roll(3, 2).unwrap();
        let a = ca.forward(store.values(), &x).unwrap();
        let b = ca.forward(store.values(), &flipped).unwrap();
        assert_eq!(a.shape(), &[1, 8, 1, 1]);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn squeeze_ratio_must_divide_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        assert!(ChannelAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 4).is_err());
    }

    #[test]
    fn open_gate_passes_the_deep_branch() {
        let (m, mut store) = build(|pb| Msfm::new(pb, 4, 2));
        let bias = m.reduce.bias.unwrap();
        store.set(bias, Tensor::full(&[4], 60.0));
        let w = m.reduce.weight;
        store.set(w, Tensor::zeros(&[4, 8, 1, 1]));
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        for conv in [&m.out_deep, &m.out_skip] {
            store.set(conv.weight, Tensor::from_f64(&[4, 4, 1, 1], &eye).unwrap());
        }
        let deep = wavy(&[1, 4, 4, 4], 0.0);
        let skip = wavy(&[1, 2, 8, 8], 1.0);
        let (y, gate) = m.forward_with_gate(store.values(), &deep, &skip).unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g <= 1.0));
        for (a, b) in y.data().iter().zip(deep.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_lies_strictly_inside_unit_interval() {
        let (m, store) = build(|pb| Msfm::new(pb, 8, 4));
        let (_, gate) = m
            .forward_with_gate(store.values(), &wavy(&[2, 8, 4, 4], 0.0), &wavy(&[2, 4, 8, 8], 0.5))
            .unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn default_decoder_geometry_and_zero_head() {
        let (dec, store) = build(|pb| Decoder::new(pb, &[24, 48, 96], 192, true, 4));
        let skips = [
            wavy(&[1, 24, 16, 16], 0.0),
            wavy(&[1, 48, 8, 8], 0.3),
            wavy(&[1, 96, 4, 4], 0.6),
        ];
        let out = dec
            .forward(store.values(), &skips, &wavy(&[1, 192, 2, 2], 0.9), 4)
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
