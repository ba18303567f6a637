//! Bottleneck fusion: the two deepest feature maps are summed, flattened to a
//! row-major token sequence and refined by stacked attention, Mamba and MLP
//! blocks.

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, Params};
use crate::params::ParamBuilder;
use crate::scalar::Scalar;
use crate::ssm::{MambaBlock, SsmConfig};
use crate::tensor::Tensor;

/// Elementwise sum of two feature maps of identical shape.
pub fn additive_fuse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("additive_fuse", a.shape(), b.shape()));
    }
    a.add(b)
}

/// N×C×H×W → N×(H·W)×C with W varying fastest.
pub fn serialize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("serialize")?;
    x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])
}

/// Inverse of [`serialize`].
pub fn deserialize<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, l, c) = x.dims3("deserialize")?;
    if l != h * w {
        return Err(Error::invalid(
            "deserialize",
            format!("{l} tokens cannot fill a {h}×{w} grid"),
        ));
    }
    x.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfmConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Adds the block input back onto the Mamba output.
    pub mamba_residual: bool,
    pub ssm: SsmConfig,
}

impl Default for BfmConfig {
    fn default() -> Self {
        BfmConfig {
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            mamba_residual: false,
            ssm: SsmConfig::default(),
        }
    }
}

/// Post-norm self-attention: `LN(x + MHA(x))`.
#[derive(Clone, Debug)]
pub struct MhaBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl MhaBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, heads: usize) -> Result<Self> {
        Ok(MhaBlock {
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), dim, heads)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), dim),
        })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, x)?.0)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        p: Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (attended, weights) = self.attn.forward_with_weights(p, x, None)?;
        Ok((self.norm.forward(p, &x.add(&attended)?)?, weights))
    }
}

/// Post-norm feed-forward: `LN(x + fc2(GELU(fc1 x)))`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
}

impl MlpBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio.max(1);
        MlpBlock {
            fc1: Linear::new(&mut pb.sub("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, dim, true),
            norm: LayerNorm::new(&mut pb.sub("norm"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu()?)?;
        self.norm.forward(p, &x.add(&h)?)
    }
}

/// One attention → Mamba → MLP refinement step over a token sequence.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub mha: MhaBlock,
    pub mamba: MambaBlock,
    pub mlp: MlpBlock,
}

impl FusionBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, cfg: &BfmConfig) -> Result<Self> {
        Ok(FusionBlock {
            mha: MhaBlock::new(&mut pb.sub("mha"), dim, cfg.num_heads)?,
            mamba: MambaBlock::new(&mut pb.sub("mamba"), dim, &cfg.ssm, cfg.mamba_residual),
            mlp: MlpBlock::new(&mut pb.sub("mlp"), dim, cfg.mlp_ratio),
        })
    }

    pub fn forward<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.mha.forward(p, x)?;
        let x = self.mamba.forward(p, &x)?;
        self.mlp.forward(p, &x)
    }
}

/// Stack of [`FusionBlock`]s applied to the summed pair of feature maps.
#[derive(Clone, Debug)]
pub struct Bfm {
    pub blocks: Vec<FusionBlock>,
}

impl Bfm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, dim: usize, cfg: &BfmConfig) -> Result<Self> {
        if cfg.num_heads == 0 || !dim.is_multiple_of(cfg.num_heads) {
            return Err(Error::invalid(
                "bfm",
                format!("{dim} channels are not divisible by {} heads", cfg.num_heads),
            ));
        }
        let blocks = (0..cfg.num_blocks)
            .map(|i| FusionBlock::new(&mut pb.sub(format!("block{i}")), dim, cfg))
            .collect::<Result<_>>()?;
        Ok(Bfm { blocks })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: Params<T>,
        rgbd: &Tensor<T>,
        depth: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let fused = additive_fuse(rgbd, depth)?;
        self.refine(p, &fused)
    }

    /// Runs the block stack on one N×C×H×W map.
    pub fn refine<T: Scalar>(&self, p: Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.blocks.is_empty() {
            return Ok(x.clone());
        }
        let (_, _, h, w) = x.dims4("bfm")?;
        let mut tokens = serialize(x)?;
        for block in &self.blocks {
            tokens = block.forward(p, &tokens)?;
        }
        deserialize(&tokens, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamStore};

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn fuse_identity_inverse_and_commutativity() {
        let a = ramp(&[2, 3, 4, 4], 0.1);
        let b = ramp(&[2, 3, 4, 4], -0.37);
        assert!(additive_fuse(&a, &Tensor::zeros(a.shape())).unwrap().bit_eq(&a));
        let neg = a.neg().unwrap();
        assert!(additive_fuse(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(additive_fuse(&a, &b).unwrap().bit_eq(&additive_fuse(&b, &a).unwrap()));
        assert!(additive_fuse(&a, &ramp(&[2, 3, 4, 2], 1.0)).is_err());
    }

    #[test]
    fn serialization_is_row_major_and_round_trips() {
        let x = ramp(&[2, 3, 2, 5], 1.0);
        let s = serialize(&x).unwrap();
        assert_eq!(s.shape(), &[2, 10, 3]);
        // Token (h=1, w=3) of batch 1, channel 2.
        let src = x.data()[((3 + 2) * 2 + 1) * 5 + 3];
        assert_eq!(s.data()[(10 + 8) * 3 + 2], src);
        assert!(deserialize(&s, 2, 5).unwrap().bit_eq(&x));
        assert!(deserialize(&s, 3, 3).is_err());
    }

    #[test]
    fn empty_stack_returns_the_sum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        let cfg = BfmConfig {
            num_blocks: 0,
            ..BfmConfig::default()
        };
        let bfm = Bfm::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, &cfg).unwrap();
        let a = ramp(&[1, 8, 2, 3], 0.2);
        let b = ramp(&[1, 8, 2, 3], 0.5);
        let y = bfm.forward(store.values(), &a, &b).unwrap();
        assert!(y.bit_eq(&a.add(&b).unwrap()));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        let err = Bfm::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, &BfmConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn zero_mlp_reduces_to_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(1);
        let mlp = MlpBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 2);
        for id in [mlp.fc1.weight, mlp.fc2.weight] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let x = ramp(&[2, 3, 6], 0.3);
        let p = store.values();
        let want = x.layer_norm(&p[mlp.norm.gamma], &p[mlp.norm.beta]).unwrap();
        assert!(mlp.forward(p, &x).unwrap().bit_eq(&want));
    }
}
