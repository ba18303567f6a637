//! `key = value` run configuration with dotted keys and `#` comments.
//! Unknown keys are rejected so typos never pass silently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use htmnet_core::loss::LossConfig;
use htmnet_core::metrics::MetricScope;
use htmnet_core::model::{FusionMode, ModelConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Total optimiser steps; 0 means `epochs` full passes.
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 40,
            steps: 0,
            seed: 0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub size: usize,
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            size: 64,
            count: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub precision: Precision,
    pub scope: MetricScope,
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse `{}`", s.trim())))
        .collect()
}

fn four(v: &str) -> Result<[usize; 4], String> {
    let items: Vec<usize> = list(v)?;
    items.try_into().map_err(|_| "expected four comma-separated integers".to_string())
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err("expected on|off".into()),
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| "not a number".to_string())
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The reduced model used for quick experiments and tests.
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            ..RunConfig::default()
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        let m = &mut self.model;
        let r = match key {
            "model.stage_widths" => four(v).map(|x| m.encoder.stage_widths = x),
            "model.window_size" => num(v).map(|x| m.encoder.window_size = x),
            "model.blocks_per_stage" => four(v).map(|x| m.encoder.blocks_per_stage = x),
            "model.resnet_blocks_per_stage" => four(v).map(|x| m.encoder.resnet_blocks_per_stage = x),
            "model.head_dim" => num(v).map(|x| m.encoder.head_dim = x),
            "model.d_max" => num(v).map(|x| m.d_max = x),
            "bfm.num_blocks" => num(v).map(|x| m.bfm.num_blocks = x),
            "bfm.num_heads" => num(v).map(|x| m.bfm.num_heads = x),
            "bfm.mlp_ratio" => num(v).map(|x| m.bfm.mlp_ratio = x),
            "bfm.mamba_residual" => flag(v).map(|x| m.bfm.mamba_residual = x),
            "bfm.scan_order" => match v {
                "row_major" => Ok(()),
                _ => Err("only row_major is supported".into()),
            },
            "ssm.state_size" => num(v).map(|x| m.bfm.ssm.state_size = x),
            "ssm.expand" => num(v).map(|x| m.bfm.ssm.expand = x),
            "ssm.conv_kernel" => num(v).map(|x| m.bfm.ssm.conv_kernel = x),
            "ssm.selective" => flag(v).map(|x| m.bfm.ssm.selective = x),
            "fusion.mode" => v.parse::<FusionMode>().map(|x| m.fusion_mode = x).map_err(|e| e.to_string()),
            "fusion.bfm" => flag(v).map(|x| m.fusion_units = x),
            "decoder.msfm" => flag(v).map(|x| m.msfm = x),
            "decoder.squeeze_ratio" => num(v).map(|x| m.squeeze_ratio = x),
            "train.lr" => num(v).map(|x| self.train.lr = x),
            "train.batch_size" => num(v).map(|x| self.train.batch_size = x),
            "train.epochs" => num(v).map(|x| self.train.epochs = x),
            "train.steps" => num(v).map(|x| self.train.steps = x),
            "train.seed" => num(v).map(|x| self.train.seed = x),
            "train.weight_decay" => num(v).map(|x| self.train.weight_decay = x),
            "train.betas" => list::<f64>(v).and_then(|b| match b[..] {
                [b1, b2] => {
                    self.train.betas = (b1, b2);
                    Ok(())
                }
                _ => Err("expected two comma-separated numbers".into()),
            }),
            "loss.alpha" => num(v).map(|x| self.loss.alpha = x),
            "loss.mask_weight" => num(v).map(|x| self.loss.mask_weight = x),
            "loss.background_weight" => num(v).map(|x| self.loss.background_weight = x),
            "data.path" => {
                self.data.path = Some(PathBuf::from(v));
                Ok(())
            }
            "data.size" => num(v).map(|x| self.data.size = x),
            "data.count" => num(v).map(|x| self.data.count = x),
            "precision" => match v {
                "f32" => {
                    let _: () = self.precision = Precision::F32;
                    Ok(())
                },
                "f64" => {
                    let _: () = self.precision = Precision::F64;
                    Ok(())
                },
                _ => Err("expected f32|f64".into()),
            },
            "metrics.scope" => v.parse::<MetricScope>().map(|x| self.scope = x).map_err(|e| e.to_string()),
            _ => return None,
        };
        Some(r)
    }

    /// Applies the lines of `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies the lines of `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            match self.set(key, value) {
                None => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.into(),
                    })
                }
                Some(Err(msg)) => {
                    return Err(ConfigError::Value {
                        line,
                        key: key.into(),
                        value: value.into(),
                        msg,
                    })
                }
                Some(Ok(())) => {}
            }
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.train;
        // A zero rate is accepted so a frozen run can be used as a baseline.
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return bad(format!("train.lr must be non-negative, got {}", t.lr));
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if t.epochs == 0 && t.steps == 0 {
            return bad("train.epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&t.betas.0) || !(0.0..1.0).contains(&t.betas.1) {
            return bad("train.betas must lie in [0, 1)".into());
        }
        if !(t.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative".into());
        }
        if self.data.size == 0 || self.data.count == 0 {
            return bad("data.size and data.count must be positive".into());
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model
            .encoder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let m = &self.model;
        if m.bfm.num_heads == 0 || m.bfm.mlp_ratio == 0 {
            return bad("bfm.num_heads and bfm.mlp_ratio must be positive".into());
        }
        if m.bfm.ssm.state_size == 0 || m.bfm.ssm.expand == 0 || m.bfm.ssm.conv_kernel == 0 {
            return bad("ssm sizes must be positive".into());
        }
        if !(m.d_max.is_finite() && m.d_max > 0.0) {
            return bad("model.d_max must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("model.stage_widths", join(&e.stage_widths));
        put("model.window_size", e.window_size.to_string());
        put("model.blocks_per_stage", join(&e.blocks_per_stage));
        put("model.resnet_blocks_per_stage", join(&e.resnet_blocks_per_stage));
        put("model.head_dim", e.head_dim.to_string());
        put("model.d_max", m.d_max.to_string());
        put("bfm.num_blocks", m.bfm.num_blocks.to_string());
        put("bfm.num_heads", m.bfm.num_heads.to_string());
        put("bfm.mlp_ratio", m.bfm.mlp_ratio.to_string());
        put("bfm.mamba_residual", on_off(m.bfm.mamba_residual).into());
        put("bfm.scan_order", "row_major".into());
        put("ssm.state_size", m.bfm.ssm.state_size.to_string());
        put("ssm.expand", m.bfm.ssm.expand.to_string());
        put("ssm.conv_kernel", m.bfm.ssm.conv_kernel.to_string());
        put("ssm.selective", on_off(m.bfm.ssm.selective).into());
        put("fusion.mode", m.fusion_mode.to_string());
        put("fusion.bfm", on_off(m.fusion_units).into());
        put("decoder.msfm", on_off(m.msfm).into());
        put("decoder.squeeze_ratio", m.squeeze_ratio.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.steps", self.train.steps.to_string());
        put("train.seed", self.train.seed.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.betas", format!("{},{}", self.train.betas.0, self.train.betas.1));
        put("loss.alpha", self.loss.alpha.to_string());
        put("loss.mask_weight", self.loss.mask_weight.to_string());
        put("loss.background_weight", self.loss.background_weight.to_string());
        if let Some(p) = &self.data.path {
            put("data.path", p.display().to_string());
        }
        put("data.size", self.data.size.to_string());
        put("data.count", self.data.count.to_string());
        put(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        put(
            "metrics.scope",
            match self.scope {
                MetricScope::Mask => "mask",
                MetricScope::All => "all",
            }
            .into(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_train_40_epochs_of_batch_8_at_lr_1e3() {
        let c = RunConfig::default();
        assert_eq!((c.train.lr, c.train.batch_size, c.train.epochs), (1e-3, 8, 40));
        assert_eq!(c.train.weight_decay, 0.01);
        assert_eq!(c.model.bfm.num_blocks, 4);
    }

    #[test]
    fn parses_comments_and_dotted_keys() {
        let c = RunConfig::parse(
            "# tiny run\nmodel.stage_widths = 16, 32,64,128\ntrain.lr = 0.002 # faster\n\nfusion.mode = layerwise\ndecoder.msfm = off\n",
        )
        .unwrap();
        assert_eq!(c.model.encoder.stage_widths, [16, 32, 64, 128]);
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.model.fusion_mode, FusionMode::Layerwise);
        assert!(!c.model.msfm);
    }

    #[test]
    fn rejects_typos_and_bad_values() {
        assert!(matches!(
            RunConfig::parse("train.lrate = 1"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(RunConfig::parse("\ntrain.lr 1"), Err(ConfigError::Syntax { line: 2 })));
        assert!(matches!(RunConfig::parse("train.batch_size = -1"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("train.batch_size = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("model.stage_widths = 1,2"), Err(ConfigError::Value { .. })));
        assert!(RunConfig::parse("train.lr = 0").is_ok());
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = RunConfig::tiny();
        c.train.betas = (0.8, 0.95);
        c.data.path = Some("some/dir".into());
        c.precision = Precision::F64;
        c.scope = MetricScope::All;
        c.model.bfm.ssm.selective = false;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
