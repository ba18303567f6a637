//! Finite-difference gradient checks for every network block on small
//! shapes, run in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfm::{additive_fuse, Bfm, BfmConfig, MhaBlock, MlpBlock};
use crate::decoder::{channel_shuffle, ChannelAttention, Decoder, Msfm, SpatialAttention};
use crate::encoder::{CnnBranch, Encoder, EncoderConfig, TransformerBranch};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_each, Probe};
use crate::loss::{depth_loss, normals_from_depth, LossConfig};
use crate::model::{HtmNet, ModelConfig};
use crate::params::{init_rng, ParamBuilder, ParamStore};
use crate::ssm::MambaBlock;
use crate::tensor::Tensor;

pub const CHECK_EPS: f64 = 1e-6;
pub const CHECK_TOLERANCE: f64 = 1e-4;

pub const BLOCK_NAMES: [&str; 16] = [
    "additive_fuse",
    "mha_block",
    "mamba_block",
    "mlp_block",
    "bfm",
    "spatial_attention",
    "channel_attention",
    "channel_shuffle",
    "msfm",
    "transformer_branch",
    "cnn_branch",
    "encoder",
    "decoder",
    "normals",
    "loss",
    "full_model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= CHECK_TOLERANCE
    }
}

/// Hyperparameters the checks borrow from a model configuration. Shapes are
/// always small.
#[derive(Clone, Debug)]
pub struct CheckSettings {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Block whose output gets a deliberately wrong backward rule.
    pub fault: Option<String>,
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<String>,
}

impl Ctx {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, v).expect("non-empty shape")
    }

    fn build<M>(&mut self, f: impl FnOnce(&mut ParamBuilder<f64>) -> Result<M>) -> Result<(M, ParamStore<f64>)> {
        let mut store = ParamStore::new();
        let mut rng = init_rng(self.rng.gen());
        let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((m, store))
    }

    fn finish(&self, name: &'static str, y: Tensor<f64>) -> Result<Tensor<f64>> {
        if self.fault.as_deref() == Some(name) {
            y.faulty_identity()
        } else {
            Ok(y)
        }
    }
}

/// Randomises a zero-initialised output layer so gradients reach upstream.
fn wake_head(ctx: &mut Ctx, store: &mut ParamStore<f64>, dec: &Decoder) {
    let id = dec.head_out.weight;
    let shape = store.get(id).shape().to_vec();
    store.set(id, ctx.uniform(&shape, -0.5, 0.5));
}

fn with_params(inputs: Vec<Tensor<f64>>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut all = inputs;
    all.extend(store.values().iter().cloned());
    all
}

/// Attention dim divisible by the configured head count.
fn attn_dim(cfg: &BfmConfig) -> usize {
    4 * cfg.num_heads.max(1)
}

fn tiny_encoder(model: &ModelConfig) -> EncoderConfig {
    EncoderConfig {
        stage_widths: [4, 8, 8, 8],
        blocks_per_stage: [2, 1, 1, 1],
        resnet_blocks_per_stage: [1, 1, 1, 1],
        head_dim: 4,
        window_size: model.encoder.window_size,
    }
}

fn run_block(ctx: &mut Ctx, settings: &CheckSettings, name: &'static str) -> Result<f64> {
    let model = &settings.model;
    let all = |n: usize| vec![Probe::All; n];
    match name {
        "additive_fuse" => {
            let inputs = vec![ctx.uniform(&[1, 4, 3, 3], -1.0, 1.0), ctx.uniform(&[1, 4, 3, 3], -1.0, 1.0)];
            grad_check_each(|t| ctx.finish(name, additive_fuse(&t[0], &t[1])?), &inputs, CHECK_EPS, &all(2))
        }
        "mha_block" => {
            let dim = attn_dim(&model.bfm);
            let (block, store) = ctx.build(|pb| MhaBlock::new(pb, dim, model.bfm.num_heads))?;
            let inputs = with_params(vec![ctx.uniform(&[1, 8, dim], -1.0, 1.0)], &store);
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, block.forward(&t[1..], &t[0])?), &inputs, CHECK_EPS, &all(n))
        }
        "mamba_block" => {
            let (block, store) = ctx.build(|pb| Ok(MambaBlock::new(pb, 8, &model.bfm.ssm, model.bfm.mamba_residual)))?;
            let inputs = with_params(vec![ctx.uniform(&[1, 6, 8], -1.0, 1.0)], &store);
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, block.forward(&t[1..], &t[0])?), &inputs, CHECK_EPS, &all(n))
        }
        "mlp_block" => {
            let (block, store) = ctx.build(|pb| Ok(MlpBlock::new(pb, 8, model.bfm.mlp_ratio)))?;
            let inputs = with_params(vec![ctx.uniform(&[2, 5, 8], -1.0, 1.0)], &store);
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, block.forward(&t[1..], &t[0])?), &inputs, CHECK_EPS, &all(n))
        }
        "bfm" => {
            let dim = attn_dim(&model.bfm);
            let (bfm, store) = ctx.build(|pb| Bfm::new(pb, dim, &model.bfm))?;
            let inputs = with_params(
                vec![ctx.uniform(&[1, dim, 3, 3], -1.0, 1.0), ctx.uniform(&[1, dim, 3, 3], -1.0, 1.0)],
                &store,
            );
            let mut probes = all(2);
            probes.resize(inputs.len(), Probe::Sample(16));
            grad_check_each(|t| ctx.finish(name, bfm.forward(&t[2..], &t[0], &t[1])?), &inputs, CHECK_EPS, &probes)
        }
        "spatial_attention" => {
            let (sa, store) = ctx.build(|pb| Ok(SpatialAttention::new(pb)))?;
            let inputs = with_params(vec![ctx.uniform(&[1, 4, 6, 6], -1.0, 1.0)], &store);
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, sa.forward(&t[1..], &t[0])?), &inputs, CHECK_EPS, &all(n))
        }
        "channel_attention" => {
            let c = 2 * model.squeeze_ratio;
            let (ca, store) = ctx.build(|pb| ChannelAttention::new(pb, c, model.squeeze_ratio))?;
            let inputs = with_params(vec![ctx.uniform(&[1, c, 3, 3], -1.0, 1.0)], &store);
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, ca.forward(&t[1..], &t[0])?), &inputs, CHECK_EPS, &all(n))
        }
        "channel_shuffle" => {
            let inputs = vec![ctx.uniform(&[1, 8, 2, 2], -1.0, 1.0)];
            grad_check_each(|t| ctx.finish(name, channel_shuffle(&t[0], 2)?), &inputs, CHECK_EPS, &all(1))
        }
        "msfm" => {
            let c = 2 * model.squeeze_ratio;
            let (m, store) = ctx.build(|pb| Msfm::new(pb, c, model.squeeze_ratio))?;
            let inputs = with_params(
                vec![ctx.uniform(&[1, c, 4, 4], -1.0, 1.0), ctx.uniform(&[1, c / 2, 8, 8], -1.0, 1.0)],
                &store,
            );
            let n = inputs.len();
            grad_check_each(|t| ctx.finish(name, m.forward(&t[2..], &t[0], &t[1])?), &inputs, CHECK_EPS, &all(n))
        }
        "transformer_branch" => {
            let cfg = tiny_encoder(model);
            let (branch, store) = ctx.build(|pb| TransformerBranch::new(pb, 4, &cfg))?;
            let inputs = with_params(vec![ctx.uniform(&[1, 4, 32, 32], 0.0, 1.0)], &store);
            let mut probes = vec![Probe::Sample(64)];
            probes.resize(inputs.len(), Probe::Sample(8));
            let f = |t: &[Tensor<f64>]| {
                let feats = branch.forward(&t[1..], &t[0])?;
                ctx.finish(name, flatten(&feats)?)
            };
            grad_check_each(f, &inputs, CHECK_EPS, &probes)
        }
        "cnn_branch" => {
            let cfg = tiny_encoder(model);
            let (branch, store) = ctx.build(|pb| CnnBranch::new(pb, 1, &cfg))?;
            let inputs = with_params(vec![ctx.uniform(&[1, 1, 32, 32], 0.0, 1.0)], &store);
            let mut probes = vec![Probe::Sample(64)];
            probes.resize(inputs.len(), Probe::Sample(8));
            let f = |t: &[Tensor<f64>]| {
                let feats = branch.forward(&t[1..], &t[0])?;
                ctx.finish(name, flatten(&feats)?)
            };
            grad_check_each(f, &inputs, CHECK_EPS, &probes)
        }
        "encoder" => {
            let cfg = tiny_encoder(model);
            let (enc, store) = ctx.build(|pb| Encoder::new(pb, &cfg))?;
            let inputs = with_params(
                vec![ctx.uniform(&[1, 4, 32, 32], 0.0, 1.0), ctx.uniform(&[1, 1, 32, 32], 0.0, 1.0)],
                &store,
            );
            let mut probes = vec![Probe::Sample(32); 2];
            probes.resize(inputs.len(), Probe::Sample(4));
            let f = |t: &[Tensor<f64>]| {
                let e = enc.encode(&t[2..], &t[0], &t[1])?;
                let mut parts = e.skips.clone();
                parts.push(e.rgbd);
                parts.push(e.depth);
                ctx.finish(name, flatten(&parts)?)
            };
            grad_check_each(f, &inputs, CHECK_EPS, &probes)
        }
        "decoder" => {
            let c = 2 * model.squeeze_ratio;
            let (dec, mut store) = ctx.build(|pb| Decoder::new(pb, &[c, c, c], c, model.msfm, model.squeeze_ratio))?;
            wake_head(ctx, &mut store, &dec);
            let inputs = with_params(
                vec![
                    ctx.uniform(&[1, c, 8, 8], -1.0, 1.0),
                    ctx.uniform(&[1, c, 4, 4], -1.0, 1.0),
                    ctx.uniform(&[1, c, 2, 2], -1.0, 1.0),
                    ctx.uniform(&[1, c, 1, 1], -1.0, 1.0),
                ],
                &store,
            );
            let mut probes = vec![Probe::Sample(32); 4];
            probes.resize(inputs.len(), Probe::Sample(8));
            let f = |t: &[Tensor<f64>]| ctx.finish(name, dec.forward(&t[4..], &t[..3], &t[3], 4)?);
            grad_check_each(f, &inputs, CHECK_EPS, &probes)
        }
        "normals" => {
            let inputs = vec![ctx.uniform(&[2, 1, 5, 6], 0.5, 3.0)];
            grad_check_each(|t| ctx.finish(name, normals_from_depth(&t[0])?), &inputs, CHECK_EPS, &all(1))
        }
        "loss" => {
            let gt = ctx.uniform(&[2, 1, 6, 6], 0.5, 3.0);
            let mask = ctx.uniform(&[2, 1, 6, 6], 0.0, 1.0);
            let cfg = LossConfig {
                alpha: settings.loss.alpha.max(0.5),
                ..settings.loss.clone()
            };
            let inputs = vec![ctx.uniform(&[2, 1, 6, 6], 0.5, 3.0)];
            grad_check_each(|t| ctx.finish(name, depth_loss(&t[0], &gt, &mask, &cfg)?), &inputs, CHECK_EPS, &all(1))
        }
        "full_model" => {
            let (net, mut store) = ctx.build(|pb| HtmNet::new(pb, model))?;
            wake_head(ctx, &mut store, &net.decoder);
            let rgb = ctx.uniform(&[1, 3, 32, 32], 0.0, 1.0);
            let depth = ctx.uniform(&[1, 1, 32, 32], 0.5, 3.0);
            let gt = ctx.uniform(&[1, 1, 32, 32], 0.5, 3.0);
            let mask = ctx.uniform(&[1, 1, 32, 32], 0.0, 1.0);
            let inputs = with_params(vec![rgb, depth], &store);
            let mut probes = vec![Probe::Sample(16); 2];
            probes.resize(inputs.len(), Probe::Sample(2));
            let f = |t: &[Tensor<f64>]| {
                let pred = net.forward(&t[2..], &t[0], &t[1])?;
                ctx.finish(name, depth_loss(&pred, &gt, &mask, &settings.loss)?)
            };
            grad_check_each(f, &inputs, CHECK_EPS, &probes)
        }
        other => Err(Error::invalid("gradcheck", format!("unknown block `{other}`"))),
    }
}

/// Concatenates flattened feature maps into one vector.
fn flatten(parts: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let flat = parts
        .iter()
        .map(|p| p.reshape(&[p.numel()]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<f64>> = flat.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Checks each named block, or all of [`BLOCK_NAMES`] when `only` is empty.
pub fn check_blocks(settings: &CheckSettings, only: &[&str], seed: u64) -> Result<Vec<BlockCheck>> {
    let names: Vec<&'static str> = if only.is_empty() {
        BLOCK_NAMES.to_vec()
    } else {
        only.iter()
            .map(|n| {
                BLOCK_NAMES
                    .iter()
                    .copied()
                    .find(|b| b == n)
                    .ok_or_else(|| Error::invalid("gradcheck", format!("unknown block `{n}`")))
            })
            .collect::<Result<_>>()?
    };
    if let Some(f) = &settings.fault {
        if !BLOCK_NAMES.contains(&f.as_str()) {
            return Err(Error::invalid("gradcheck", format!("unknown block `{f}`")));
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut ctx = Ctx {
                rng: ChaCha8Rng::seed_from_u64(seed ^ fnv(name)),
                fault: settings.fault.clone(),
            };
            let max_rel_error = run_block(&mut ctx, settings, name)?;
            Ok(BlockCheck { name, max_rel_error })
        })
        .collect()
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
