//! The full depth-completion network: dual-branch encoder, bottleneck (or
//! per-stage) fusion and the MSFM decoder with a residual depth head.

use crate::bfm::{additive_fuse, Bfm, BfmConfig};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderConfig, MAX_STRIDE, NUM_STAGES, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::params::{init_rng, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the attention/Mamba fusion units sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// One stack on the deepest encoder stage.
    #[default]
    Bottleneck,
    /// A single-block unit on every encoder stage.
    Layerwise,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(FusionMode::Bottleneck),
            "layerwise" => Ok(FusionMode::Layerwise),
            other => Err(Error::invalid("fusion_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Bottleneck => "bottleneck",
            FusionMode::Layerwise => "layerwise",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bfm: BfmConfig,
    pub fusion_mode: FusionMode,
    /// When false the fused features are plain sums.
    pub fusion_units: bool,
    /// When false decoder skips are merged by addition.
    pub msfm: bool,
    pub squeeze_ratio: usize,
    /// Depth normalisation constant and inference clamp, in metres.
    pub d_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            bfm: BfmConfig::default(),
            fusion_mode: FusionMode::Bottleneck,
            fusion_units: true,
            msfm: true,
            squeeze_ratio: 4,
            d_max: 10.0,
        }
    }
}

impl ModelConfig {
    /// Small widths used by tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stage_widths: [16, 32, 64, 128],
                ..EncoderConfig::default()
            },
            bfm: BfmConfig {
                num_blocks: 2,
                ..BfmConfig::default()
            },
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Bottleneck(Option<Bfm>),
    Layerwise(Vec<Option<Bfm>>),
}

#[derive(Clone, Debug)]
pub struct HtmNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    fusion: Fusion,
    pub decoder: Decoder,
}

impl HtmNet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: &ModelConfig) -> Result<Self> {
        if !(cfg.d_max.is_finite() && cfg.d_max > 0.0) {
            return Err(Error::invalid("model_config", "d_max must be positive"));
        }
        let widths = cfg.encoder.stage_widths;
        let encoder = Encoder::new(&mut pb.sub("encoder"), &cfg.encoder)?;
        let fusion = match (cfg.fusion_mode, cfg.fusion_units) {
            (FusionMode::Bottleneck, on) => Fusion::Bottleneck(if on {
                Some(Bfm::new(&mut pb.sub("bfm"), widths[NUM_STAGES - 1], &cfg.bfm)?)
            } else {
                None
            }),
            (FusionMode::Layerwise, on) => {
                let unit = BfmConfig {
                    num_blocks: 1,
                    ..cfg.bfm.clone()
                };
                let units = widths
                    .iter()
                    .enumerate()
                    .map(|(s, &w)| {
                        on.then(|| Bfm::new(&mut pb.sub(format!("fusion{}", s + 1)), w, &unit))
                            .transpose()
                    })
                    .collect::<Result<_>>()?;
                Fusion::Layerwise(units)
            }
        };
        let decoder = Decoder::new(
            &mut pb.sub("decoder"),
            &widths[..NUM_STAGES - 1],
            widths[NUM_STAGES - 1],
            cfg.msfm,
            cfg.squeeze_ratio,
        )?;
        Ok(HtmNet {
            config: cfg.clone(),
            encoder,
            fusion,
            decoder,
        })
    }

    /// Builds the network and a freshly initialised parameter store.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let net = HtmNet::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((net, store))
    }

    /// Completed depth in metres, unclamped. `rgb` is N×3×H×W in [0, 1],
    /// `depth` is N×1×H×W in metres. Inputs of any size are reflect-padded
    /// to a multiple of the deepest stride and cropped back.
    pub fn forward<T: Scalar>(&self, p: Params<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = rgb.dims4("htmnet")?;
        let (dn, dc, dh, dw) = depth.dims4("htmnet")?;
        if c != 3 || dc != 1 || (n, h, w) != (dn, dh, dw) {
            return Err(Error::shapes("htmnet", rgb.shape(), depth.shape()));
        }
        let (ph, pw) = (h.div_ceil(MAX_STRIDE) * MAX_STRIDE, w.div_ceil(MAX_STRIDE) * MAX_STRIDE);
        let scaled = depth.mul_scalar(T::of(1.0 / self.config.d_max))?;
        let rgb_p = reflect_pad(rgb, ph, pw)?;
        let depth_p = reflect_pad(&scaled, ph, pw)?;
        let rgbd = Tensor::concat(&[&rgb_p, &depth_p], 1)?;
        let residual = self.residual(p, &rgbd, &depth_p)?;
        let residual = crop(&residual, h, w)?;
        depth.add(&residual.mul_scalar(T::of(self.config.d_max))?)
    }

    /// [`forward`](Self::forward) with the output clamped to `[0, d_max]`.
    pub fn predict<T: Scalar>(&self, p: Params<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(p, &rgb.detach(), &depth.detach())?;
        let hi = self.config.d_max;
        let data = out
            .data()
            .iter()
            .map(|v| T::of(v.f64().clamp(0.0, hi)))
            .collect();
        Tensor::new(out.shape(), data)
    }

    fn residual<T: Scalar>(&self, p: Params<T>, rgbd: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let (skips, bottleneck) = match &self.fusion {
            Fusion::Bottleneck(bfm) => {
                let enc = self.encoder.encode(p, rgbd, depth)?;
                let deep = match bfm {
                    Some(b) => b.forward(p, &enc.rgbd, &enc.depth)?,
                    None => additive_fuse(&enc.rgbd, &enc.depth)?,
                };
                (enc.skips, deep)
            }
            Fusion::Layerwise(units) => {
                let (t, c) = self.encoder.branches(p, rgbd, depth)?;
                let mut fused = t
                    .iter()
                    .zip(&c)
                    .zip(units)
                    .map(|((a, b), unit)| match unit {
                        Some(u) => u.forward(p, a, b),
                        None => additive_fuse(a, b),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let deep = fused.pop().expect("four stages");
                (fused, deep)
            }
        };
        self.decoder.forward(p, &skips, &bottleneck, PATCH_SIZE)
    }
}

fn reflect_indices(n: usize, m: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0; m];
    }
    let period = 2 * (n - 1);
    (0..m)
        .map(|i| {
            let j = i % period;
            if j < n {
                j
            } else {
                period - j
            }
        })
        .collect()
}

/// Mirror-pads the bottom and right edges of an N×C×H×W map to `h×w`.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, xh, xw) = x.dims4("reflect_pad")?;
    if h < xh || w < xw {
        return Err(Error::invalid("reflect_pad", format!("cannot pad {xh}×{xw} down to {h}×{w}")));
    }
    let mut y = x.clone();
    if h != xh {
        y = y.gather_axis(2, &reflect_indices(xh, h))?;
    }
    if w != xw {
        y = y.gather_axis(3, &reflect_indices(xw, w))?;
    }
    Ok(y)
}

/// Keeps the top-left `h×w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, xh, xw) = x.dims4("crop")?;
    let mut y = x.clone();
    if h != xh {
        y = y.slice(2, 0, h)?;
    }
    if w != xw {
        y = y.slice(3, 0, w)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let rgb: Vec<f64> = (0..n * 3 * h * w).map(|i| ((i as f64) * 0.13).sin() * 0.5 + 0.5).collect();
        let depth: Vec<f64> = (0..n * h * w).map(|i| 1.0 + ((i as f64) * 0.07).cos()).collect();
        (
            Tensor::from_f64(&[n, 3, h, w], &rgb).unwrap(),
            Tensor::from_f64(&[n, 1, h, w], &depth).unwrap(),
        )
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge() {
        assert_eq!(reflect_indices(4, 7), vec![0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_indices(3, 8), vec![0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect_indices(1, 3), vec![0, 0, 0]);
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let y = reflect_pad(&x, 3, 5).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 2., 1., 4., 5., 6., 5., 4., 1., 2., 3., 2., 1.]);
        assert!(crop(&y, 2, 3).unwrap().bit_eq(&x));
    }

    #[test]
    fn untrained_network_returns_its_input_depth() {
        let (net, store) = HtmNet::init::<f64>(&ModelConfig::tiny(), 1).unwrap();
        let (rgb, depth) = inputs(2, 64, 64);
        let out = net.predict(store.values(), &rgb, &depth).unwrap();
        assert!(out.bit_eq(&depth));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let (net, store) = HtmNet::init::<f64>(&ModelConfig::tiny(), 2).unwrap();
        let (rgb, depth) = inputs(1, 40, 50);
        assert_eq!(net.forward(store.values(), &rgb, &depth).unwrap().shape(), &[1, 1, 40, 50]);
    }

    #[test]
    fn prediction_is_clamped() {
        let cfg = ModelConfig::tiny();
        let (net, mut store) = HtmNet::init::<f64>(&cfg, 3).unwrap();
        let bias = net.decoder.head_out.bias.unwrap();
        store.set(bias, Tensor::full(&[1], 5.0));
        let (rgb, depth) = inputs(1, 32, 32);
        let out = net.predict(store.values(), &rgb, &depth).unwrap();
        assert!(out.data().iter().all(|&v| v == cfg.d_max));
    }

    #[test]
    fn every_ablation_keeps_the_output_shape() {
        let (rgb, depth) = inputs(1, 64, 64);
        for mode in [FusionMode::Bottleneck, FusionMode::Layerwise] {
            for units in [true, false] {
                for msfm in [true, false] {
                    let cfg = ModelConfig {
                        fusion_mode: mode,
                        fusion_units: units,
                        msfm,
                        ..ModelConfig::tiny()
                    };
                    let (net, store) = HtmNet::init::<f64>(&cfg, 4).unwrap();
                    let out = net.forward(store.values(), &rgb, &depth).unwrap();
                    assert_eq!(out.shape(), &[1, 1, 64, 64], "{mode} units={units} msfm={msfm}");
                }
            }
        }
    }

    #[test]
    fn parameter_names_are_unique_and_dotted() {
        let (_, store) = HtmNet::init::<f32>(&ModelConfig::default(), 0).unwrap();
        let mut names = store.names().to_vec();
        assert!(names.iter().all(|n| n.contains('.')));
        names.sort();
        names.dedup();
        assert_eq!(names.len(), store.len());
    }
}
