//! Dual-branch encoder: a shifted-window Transformer over the RGB-D stack and a
//! residual CNN over depth, both producing four maps at strides 4, 8, 16, 32.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, MultiHeadAttention, Params};
use crate::params::ParamBuilder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 4;
pub const NUM_STAGES: usize = 4;
/// Total downsampling of the deepest stage.
pub const MAX_STRIDE: usize = PATCH_SIZE << (NUM_STAGES - 1);
const MASKED_LOGIT: f64 = -100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stage_widths: [usize; NUM_STAGES],
    pub window_size: usize,
    pub blocks_per_stage: [usize; NUM_STAGES],
    pub resnet_blocks_per_stage: [usize; NUM_STAGES],
    /// Channels per attention head in the Transformer branch.
    pub head_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_widths: [24, 48, 96, 192],
            window_size: 4,
            blocks_per_stage: [1; NUM_STAGES],
            resnet_blocks_per_stage: [1; NUM_STAGES],
            head_dim: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("encoder_config", msg));
        if self.window_size == 0 {
            return bad("window size must be positive".into());
        }
        if self.head_dim == 0 {
            return bad("head_dim must be positive".into());
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 {
                return bad(format!("stage {} has zero width", i + 1));
            }
            let heads = (w / self.head_dim).max(1);
            if w % heads != 0 {
                return bad(format!("stage {} width {w} is not divisible into heads of {}", i + 1, self.head_dim));
            }
        }
        if self.resnet_blocks_per_stage.contains(&0) {
            return bad("every CNN stage needs at least one residual block".into());
        }
        Ok(())
    }

    pub fn heads(&self, stage: usize) -> usize {
        (self.stage_widths[stage] / self.head_dim).max(1)
    }
}

/// N×H×W×C → (N·windows)×ws²×C, windows in raster order.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, ws: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.dims4("window_partition")?;
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid(
            "window_partition",
            format!("{h}×{w} map does not tile into {ws}×{ws} windows"),
        ));
    }
    x.reshape(&[n, h / ws, ws, w / ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n * (h / ws) * (w / ws), ws * ws, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(x: &Tensor<T>, n: usize, h: usize, w: usize, ws: usize) -> Result<Tensor<T>> {
    let c = x.shape()[x.rank() - 1];
    x.reshape(&[n, h / ws, w / ws, ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, h, w, c])
}

/// Additive attention mask for a cyclically shifted h×w map, shape
/// (n·windows)×1×ws²×ws². Tokens that were not neighbours before the roll
/// cannot attend to each other.
pub fn shifted_window_mask<T: Scalar>(n: usize, h: usize, w: usize, ws: usize, shift: usize) -> Result<Tensor<T>> {
    let region = |i: usize, extent: usize| -> usize {
        if i < extent - ws {
            0
        } else if i < extent - shift {
            1
        } else {
            2
        }
    };
    let (wh, ww) = (h / ws, w / ws);
    let l = ws * ws;
    let mut data = Vec::with_capacity(n * wh * ww * l * l);
    for _ in 0..n {
        for bi in 0..wh {
            for bj in 0..ww {
                let labels: Vec<usize> = (0..l)
                    .map(|t| region(bi * ws + t / ws, h) * 3 + region(bj * ws + t % ws, w))
                    .collect();
                for a in &labels {
                    for b in &labels {
                        data.push(T::of(if a == b { 0.0 } else { MASKED_LOGIT }));
                    }
                }
            }
        }
    }
    Tensor::new(&[n * wh * ww, 1, l, l], data)
}

/// Pre-norm window attention followed by a pre-norm MLP, both residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, heads: usize, shifted: bool) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), dim),
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.sub("norm2"), dim),
            fc1: Linear::new(&mut pb.sub("fc1"), dim, 4 * dim, true),
            fc2: Linear::new(&mut pb.sub("fc2"), 4 * dim, dim, true),
            shifted,
        })
    }

    /// `x` is channels-last N×H×W×C.
    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>, window_size: usize) -> Result<Tensor<T>> {
        let (n, h, w, _) = x.dims4("swin_block")?;
        let ws = window_size.min(h).min(w);
        let shift = if self.shifted && ws < h.min(w) { ws / 2 } else { 0 };
        let mut y = self.norm1.forward(p, x)?;
        if shift > 0 {
            y = y.roll(1, -(shift as isize))?.roll(2, -(shift as isize))?;
        }
        let mask = if shift > 0 {
            Some(shifted_window_mask(n, h, w, ws, shift)?)
        } else {
            None
        };
        let attended = self.attn.forward(p, &window_partition(&y, ws)?, mask.as_ref())?;
        let mut y = window_merge(&attended, n, h, w, ws)?;
        if shift > 0 {
            y = y.roll(1, shift as isize)?.roll(2, shift as isize)?;
        }
        let x = x.add(&y)?;
        let hidden = self.fc1.forward(p, &self.norm2.forward(p, &x)?)?.gelu()?;
        x.add(&self.fc2.forward(p, &hidden)?)
    }
}

/// 2×2 neighbourhood concatenation, LayerNorm and a linear map to the next width.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, din: usize, dout: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(&mut pb.sub("norm"), 4 * din),
            reduce: Linear::new(&mut pb.sub("reduce"), 4 * din, dout, false),
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w, c) = x.dims4("patch_merging")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("patch_merging", format!("{h}×{w} map has an odd extent")));
        }
        let merged = x
            .reshape(&[n, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[n, h / 2, w / 2, 4 * c])?;
        self.reduce.forward(p, &self.norm.forward(p, &merged)?)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBranch {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerging>,
    pub window_size: usize,
}

impl TransformerBranch {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, in_channels: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths;
        let embed = Conv2d::new(&mut pb.sub("embed"), in_channels, widths[0], PATCH_SIZE, PATCH_SIZE, 0);
        let embed_norm = LayerNorm::new(&mut pb.sub("embed_norm"), widths[0]);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::with_capacity(NUM_STAGES - 1);
        // Shifted and regular windows alternate over the whole branch so that
        // single-block stages still see both.
        let mut block_index = 0;
        for s in 0..NUM_STAGES {
            if s > 0 {
                merges.push(PatchMerging::new(&mut pb.sub(format!("merge{s}")), widths[s - 1], widths[s]));
            }
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage[s]);
            for b in 0..cfg.blocks_per_stage[s] {
                let mut sub = pb.sub(format!("stage{}.block{b}", s + 1));
                blocks.push(SwinBlock::new(&mut sub, widths[s], cfg.heads(s), block_index % 2 == 1)?);
                block_index += 1;
            }
            stages.push(blocks);
        }
        Ok(TransformerBranch {
            embed,
            embed_norm,
            stages,
            merges,
            window_size: cfg.window_size,
        })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, _, h, w) = x.dims4("transformer_branch")?;
        let unit = PATCH_SIZE * self.window_size;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::invalid(
                "transformer_branch",
                format!("{h}×{w} input is not divisible by {unit}"),
            ));
        }
        let mut tokens = self
            .embed
            .forward(p, x)?
            .permute(&[0, 2, 3, 1])?;
        tokens = self.embed_norm.forward(p, &tokens)?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                tokens = self.merges[s - 1].forward(p, &tokens)?;
            }
            let (_, sh, sw, _) = tokens.dims4("transformer_branch")?;
            let ws = self.window_size.min(sh).min(sw);
            if sh % ws != 0 || sw % ws != 0 {
                return Err(Error::invalid(
                    "transformer_branch",
                    format!("stage {} map {sh}×{sw} does not tile into {ws}×{ws} windows", s + 1),
                ));
            }
            for block in blocks {
                tokens = block.forward(p, &tokens, self.window_size)?;
            }
            out.push(tokens.permute(&[0, 3, 1, 2])?);
        }
        Ok(out)
    }
}

/// Two 3×3 convolutions with an identity or strided 1×1 projection skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, cin: usize, cout: usize, stride: usize) -> Self {
        let proj = (stride != 1 || cin != cout).then(|| Conv2d::new(&mut pb.sub("proj"), cin, cout, 1, stride, 0));
        ResBlock {
            conv1: Conv2d::new(&mut pb.sub("conv1"), cin, cout, 3, stride, 1),
            conv2: Conv2d::new(&mut pb.sub("conv2"), cout, cout, 3, 1, 1),
            proj,
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv2.forward(p, &self.conv1.forward(p, x)?.relu()?)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(p, x)?,
            None => x.clone(),
        };
        y.add(&skip)?.relu()
    }
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub stem: Conv2d,
    pub stages: Vec<Vec<ResBlock>>,
}

impl CnnBranch {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, in_channels: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths;
        let stem = Conv2d::new(&mut pb.sub("stem"), in_channels, widths[0], 7, 2, 3);
        let stages = (0..NUM_STAGES)
            .map(|s| {
                (0..cfg.resnet_blocks_per_stage[s])
                    .map(|b| {
                        let (cin, stride) = match (s, b) {
                            (0, 0) => (widths[0], 1),
                            (_, 0) => (widths[s - 1], 2),
                            _ => (widths[s], 1),
                        };
                        ResBlock::new(&mut pb.sub(format!("stage{}.block{b}", s + 1)), cin, widths[s], stride)
                    })
                    .collect()
            })
            .collect();
        Ok(CnnBranch { stem, stages })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut y = self.stem.forward(p, x)?.relu()?.max_pool2d(3, 2, 1)?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for blocks in &self.stages {
            for block in blocks {
                y = block.forward(p, &y)?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }
}

/// Per-stage Transformer-branch and CNN-branch maps.
pub type BranchFeatures<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Fused skip features for the decoder plus the unfused deepest pair.
#[derive(Clone, Debug)]
pub struct Encoded<T: Scalar> {
    /// Stages 1–3, each the sum of both branches.
    pub skips: Vec<Tensor<T>>,
    /// Deepest Transformer-branch map.
    pub rgbd: Tensor<T>,
    /// Deepest CNN-branch map.
    pub depth: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub transformer: TransformerBranch,
    pub cnn: CnnBranch,
}

impl Encoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Encoder {
            transformer: TransformerBranch::new(&mut pb.sub("transformer"), 4, cfg)?,
            cnn: CnnBranch::new(&mut pb.sub("cnn"), 1, cfg)?,
        })
    }

    /// Per-stage maps of both branches, checked for matching geometry.
    pub fn branches<T: Scalar>(
        &self,
        p: Params<T>,
        rgbd: &Tensor<T>,
        depth: &Tensor<T>,
    ) -> Result<BranchFeatures<T>> {
        let t = self.transformer.forward(p, rgbd)?;
        let c = self.cnn.forward(p, depth)?;
        for (a, b) in t.iter().zip(&c) {
            if a.shape() != b.shape() {
                return Err(Error::shapes("encode", a.shape(), b.shape()));
            }
        }
        Ok((t, c))
    }

    pub fn encode<T: Scalar>(&self, p: Params<T>, rgbd: &Tensor<T>, depth: &Tensor<T>) -> Result<Encoded<T>> {
        let (mut t, mut c) = self.branches(p, rgbd, depth)?;
        let (rgbd_deep, depth_deep) = (t.pop().expect("four stages"), c.pop().expect("four stages"));
        let skips = t.iter().zip(&c).map(|(a, b)| a.add(b)).collect::<Result<_>>()?;
        Ok(Encoded {
            skips,
            rgbd: rgbd_deep,
            depth: depth_deep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamStore};

    fn build<M>(f: impl FnOnce(&mut ParamBuilder<f64>) -> Result<M>) -> (M, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let m = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (m, store)
    }

    fn wavy(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn default_stage_geometry() {
        let cfg = EncoderConfig::default();
        let (enc, store) = build(|pb| Encoder::new(pb, &cfg));
        let (t, c) = enc
            .branches(store.values(), &wavy(&[1, 4, 64, 64]), &wavy(&[1, 1, 64, 64]))
            .unwrap();
        let want = [[1, 24, 16, 16], [1, 48, 8, 8], [1, 96, 4, 4], [1, 192, 2, 2]];
        for s in 0..4 {
            assert_eq!(t[s].shape(), &want[s]);
            assert_eq!(c[s].shape(), &want[s]);
        }
    }

    #[test]
    fn window_round_trip() {
        let x = wavy(&[2, 8, 4, 3]);
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.shape(), &[16, 4, 3]);
        // Second window of batch 0 starts at (row 0, col 2).
        assert_eq!(w.data()[4 * 3], x.data()[2 * 3]);
        assert!(window_merge(&w, 2, 8, 4, 2).unwrap().bit_eq(&x));
    }

    #[test]
    fn shift_mask_separates_wrapped_regions() {
        let m = shifted_window_mask::<f64>(1, 4, 4, 2, 1).unwrap();
        assert_eq!(m.shape(), &[4, 1, 4, 4]);
        // First window lies entirely in one region.
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        // Last window mixes all four corner regions: only the diagonal is open.
        let last = &m.data()[48..];
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(last[a * 4 + b] == 0.0, a == b);
            }
        }
    }

    #[test]
    fn constant_input_gives_spatially_constant_transformer_features() {
        let cfg = EncoderConfig {
            stage_widths: [8, 8, 16, 16],
            blocks_per_stage: [2, 1, 1, 1],
            ..EncoderConfig::default()
        };
        let (branch, store) = build(|pb| TransformerBranch::new(pb, 4, &cfg));
        let feats = branch.forward(store.values(), &Tensor::full(&[1, 4, 64, 64], 0.4)).unwrap();
        for f in feats {
            let (_, c, h, w) = f.dims4("test").unwrap();
            for ch in 0..c {
                let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
                assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_input_and_biases_give_zero_cnn_features() {
        let (branch, store) = build(|pb| CnnBranch::new(pb, 1, &EncoderConfig::default()));
        let feats = branch.forward(store.values(), &Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        assert!(feats.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (branch, store) = build(|pb| TransformerBranch::new(pb, 4, &EncoderConfig::default()));
        assert!(branch.forward(store.values(), &Tensor::zeros(&[1, 4, 40, 64])).is_err());
    }
}
