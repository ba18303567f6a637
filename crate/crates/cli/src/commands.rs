//! Subcommand bodies, kept out of `main` so tests can drive them directly.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use htmnet_core::checks::{check_blocks, BlockCheck, CheckSettings, BLOCK_NAMES};
use htmnet_core::metrics::{error_map, MetricScope, ERROR_MAP_CAP};
use htmnet_core::Scalar;
use htmnet_data::io::{read_f32r, read_ppm, read_u8r1, write_f32r, write_pgm};
use htmnet_data::{generate, load_dataset, write_dataset, Sample};

use crate::config::{Precision, RunConfig};
use crate::train::{evaluate, frames, load_model, train, Frame, TrainSummary, CONFIG_FILE};

/// Bad invocation: missing inputs or arguments that cannot work. Mapped to
/// exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EVAL_HEADER: &str = "loss,rmse,rel,mae,d105,d110,d125,pixels";

pub fn gen(seed: u64, count: usize, size: usize, out: &Path, verify: bool) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let samples = generate(seed, count, size)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(out, &samples)?;
    if verify {
        let back = load_dataset(out)?;
        if back != samples {
            bail!("dataset read back from {} differs from what was written", out.display());
        }
        for (i, s) in back.iter().enumerate() {
            s.validate().map_err(|e| anyhow::anyhow!("scene {i}: {e}"))?;
        }
    }
    Ok(samples)
}

/// Training data: `--data`, else `data.path`, else generated in memory from
/// the training seed.
pub fn training_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data.map(Path::to_path_buf).or_else(|| cfg.data.path.clone()) {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(usage(format!("data directory {} does not exist", dir.display())));
            }
            Ok(load_dataset(&dir)?)
        }
        None => Ok(generate(cfg.train.seed, cfg.data.count, cfg.data.size)?),
    }
}

pub fn run_train(cfg: &RunConfig, data: Option<&Path>, out: &Path, quiet: bool) -> Result<TrainSummary> {
    let samples = training_samples(cfg, data)?;
    let mut stdout = std::io::stdout();
    if !quiet {
        writeln!(stdout, "{}", crate::train::LOG_HEADER)?;
    }
    let summary = train(cfg, &samples, out, &mut |row| {
        if !quiet {
            let _ = writeln!(stdout, "{}", row.csv());
        }
    })?;
    if !quiet {
        println!(
            "{} steps, {:.2} images/s, best epoch {}",
            summary.steps, summary.throughput, summary.best_epoch
        );
    }
    Ok(summary)
}

/// Configuration for a checkpoint: explicit, else the `run.cfg` written
/// next to it by `train`.
pub fn checkpoint_config(ckpt: &Path, config: Option<&Path>) -> Result<RunConfig> {
    if !ckpt.is_file() {
        return Err(usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    if !path.is_file() {
        return Err(usage(format!(
            "no configuration at {}; pass --config",
            path.display()
        )));
    }
    Ok(RunConfig::load(&path)?)
}

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub config: Option<&'a Path>,
    pub scope: Option<MetricScope>,
    pub csv: Option<&'a Path>,
}

/// Returns the CSV row (without header) that is also printed.
pub fn run_eval(args: &EvalArgs) -> Result<String> {
    let cfg = checkpoint_config(args.ckpt, args.config)?;
    if !args.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", args.data.display())));
    }
    let samples = load_dataset(args.data)?;
    let scope = args.scope.unwrap_or(cfg.scope);
    let row = match cfg.precision {
        Precision::F32 => eval_as::<f32>(&cfg, args.ckpt, &samples, scope)?,
        Precision::F64 => eval_as::<f64>(&cfg, args.ckpt, &samples, scope)?,
    };
    println!("{EVAL_HEADER}\n{row}");
    if let Some(path) = args.csv {
        std::fs::write(path, format!("{EVAL_HEADER}\n{row}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(row)
}

fn eval_as<T: Scalar>(cfg: &RunConfig, ckpt: &Path, samples: &[Sample], scope: MetricScope) -> Result<String> {
    let (net, store) = load_model::<T>(cfg, ckpt)?;
    let e = evaluate(&net, &store, &frames::<T>(samples)?, cfg, scope)?;
    let r = e.report;
    Ok(format!(
        "{},{},{},{},{},{},{},{}",
        e.loss, r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125, r.pixel_count
    ))
}

pub struct InferArgs<'a> {
    pub ckpt: &'a Path,
    pub config: Option<&'a Path>,
    pub rgb: &'a Path,
    pub depth: &'a Path,
    pub out: &'a Path,
    pub gt: Option<&'a Path>,
    pub mask: Option<&'a Path>,
    pub error_map: Option<PathBuf>,
}

pub fn run_infer(args: &InferArgs) -> Result<()> {
    let cfg = checkpoint_config(args.ckpt, args.config)?;
    let rgb = read_ppm(args.rgb)?;
    let depth = read_f32r(args.depth)?;
    if (rgb.height, rgb.width) != (depth.height, depth.width) {
        bail!(
            "RGB is {}x{} but depth is {}x{}",
            rgb.width,
            rgb.height,
            depth.width,
            depth.height
        );
    }
    let (h, w) = (depth.height, depth.width);
    let sample = Sample {
        height: h,
        width: w,
        rgb: rgb.data,
        depth_gt: depth.data.clone(),
        depth_raw: depth.data,
        mask: vec![1; h * w],
    };
    let pred = match cfg.precision {
        Precision::F32 => infer_as::<f32>(&cfg, args.ckpt, &sample)?,
        Precision::F64 => infer_as::<f64>(&cfg, args.ckpt, &sample)?,
    };
    write_f32r(args.out, h, w, &pred)?;

    if let Some(map_path) = &args.error_map {
        let Some(gt_path) = args.gt else {
            return Err(usage("--error-map needs --gt"));
        };
        let gt = read_f32r(gt_path)?;
        if (gt.height, gt.width) != (h, w) {
            bail!("ground truth is {}x{}, expected {w}x{h}", gt.width, gt.height);
        }
        let mask: Vec<f32> = match args.mask {
            Some(p) => {
                let m = read_u8r1(p)?;
                if (m.height, m.width) != (h, w) {
                    bail!("mask is {}x{}, expected {w}x{h}", m.width, m.height);
                }
                m.data.iter().map(|&v| v as f32).collect()
            }
            None => vec![1.0; h * w],
        };
        write_pgm(map_path, h, w, &error_map(&pred, &gt.data, &mask, ERROR_MAP_CAP))?;
    }
    Ok(())
}

fn infer_as<T: Scalar>(cfg: &RunConfig, ckpt: &Path, sample: &Sample) -> Result<Vec<f32>> {
    let (net, store) = load_model::<T>(cfg, ckpt)?;
    let f = Frame::<T>::from_sample(sample)?;
    let out = net.predict(store.values(), &f.rgb, &f.depth)?;
    Ok(out.data().iter().map(|v| v.f64() as f32).collect())
}

/// Runs the requested block checks (all when `blocks` is empty) in f64.
pub fn run_gradcheck(cfg: &RunConfig, blocks: &[String], seed: u64, fault: Option<String>) -> Result<Vec<BlockCheck>> {
    for b in blocks {
        if !BLOCK_NAMES.contains(&b.as_str()) {
            return Err(usage(format!(
                "unknown block `{b}`; known blocks: {}",
                BLOCK_NAMES.join(", ")
            )));
        }
    }
    let settings = CheckSettings {
        model: cfg.model.clone(),
        loss: cfg.loss.clone(),
        fault,
    };
    let only: Vec<&str> = blocks.iter().map(String::as_str).collect();
    Ok(check_blocks(&settings, &only, seed)?)
}

pub fn format_check(c: &BlockCheck) -> String {
    format!(
        "{:<20} max_rel_error={:.3e} {}",
        c.name,
        c.max_rel_error,
        if c.passed() { "PASS" } else { "FAIL" }
    )
}

pub fn failed_blocks(checks: &[BlockCheck]) -> Vec<&'static str> {
    checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
}


