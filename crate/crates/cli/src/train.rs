//! Training loop, evaluation pass and the per-epoch CSV log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use htmnet_core::loss::depth_loss;
use htmnet_core::metrics::{MetricAccumulator, MetricReport, MetricScope};
use htmnet_core::model::HtmNet;
use htmnet_core::params::ParamStore;
use htmnet_core::{Scalar, Tape, Tensor};
use htmnet_data::Sample;

use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::optim::{AdamW, AdamWConfig};

pub const LOG_HEADER: &str = "epoch,loss,rmse,rel,mae,d105,d110,d125";
pub const FINAL_CKPT: &str = "final.htmn";
pub const BEST_CKPT: &str = "best.htmn";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "run.cfg";

/// One sample (or a stacked batch) as network-ready tensors.
#[derive(Clone)]
pub struct Frame<T: Scalar> {
    /// N×3×H×W in [0, 1].
    pub rgb: Tensor<T>,
    /// N×1×H×W sensor depth in metres.
    pub depth: Tensor<T>,
    pub gt: Tensor<T>,
    /// N×1×H×W, 1 on transparent pixels.
    pub mask: Tensor<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn from_sample(s: &Sample) -> Result<Self> {
        let (h, w) = (s.height, s.width);
        let n = h * w;
        let mut rgb = vec![T::zero(); 3 * n];
        for (i, px) in s.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                rgb[c * n + i] = T::of(px[c] as f64 / 255.0);
            }
        }
        let plane = |v: Vec<T>| Tensor::new(&[1, 1, h, w], v);
        Ok(Frame {
            rgb: Tensor::new(&[1, 3, h, w], rgb)?,
            depth: plane(s.depth_raw.iter().map(|&d| T::of(d as f64)).collect())?,
            gt: plane(s.depth_gt.iter().map(|&d| T::of(d as f64)).collect())?,
            mask: plane(s.mask.iter().map(|&m| T::of(m as f64)).collect())?,
        })
    }

    /// Stacks frames along the batch axis.
    pub fn stack(parts: &[&Frame<T>]) -> Result<Self> {
        let cat = |f: fn(&Frame<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::concat(&ts, 0)?)
        };
        Ok(Frame {
            rgb: cat(|f| &f.rgb)?,
            depth: cat(|f| &f.depth)?,
            gt: cat(|f| &f.gt)?,
            mask: cat(|f| &f.mask)?,
        })
    }
}

pub fn frames<T: Scalar>(samples: &[Sample]) -> Result<Vec<Frame<T>>> {
    samples.iter().map(Frame::from_sample).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean of the per-sample training losses.
    pub loss: f64,
    pub report: MetricReport,
}

/// Loss and metrics of `net` over `frames`, one sample at a time. Metrics
/// use the clamped prediction, the loss the raw network output.
pub fn evaluate<T: Scalar>(
    net: &HtmNet,
    store: &ParamStore<T>,
    frames: &[Frame<T>],
    cfg: &RunConfig,
    scope: MetricScope,
) -> Result<Evaluation> {
    let mut acc = MetricAccumulator::new(scope);
    let mut loss = 0.0;
    let d_max = cfg.model.d_max;
    for f in frames {
        let pred = net.forward(store.values(), &f.rgb, &f.depth)?;
        loss += depth_loss(&pred, &f.gt, &f.mask, &cfg.loss)?.item().f64();
        let clamped: Vec<T> = pred.data().iter().map(|v| T::of(v.f64().clamp(0.0, d_max))).collect();
        acc.add(&clamped, f.gt.data(), f.mask.data())?;
    }
    Ok(Evaluation {
        loss: loss / frames.len().max(1) as f64,
        report: acc.report()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub eval: Evaluation,
}

impl EpochRow {
    pub fn csv(&self) -> String {
        let r = &self.eval.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.eval.loss, r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Epoch 0 is the untrained baseline.
    pub rows: Vec<EpochRow>,
    pub steps: usize,
    pub best_epoch: usize,
    pub seconds: f64,
    /// Training images per second, forward and backward included.
    pub throughput: f64,
}

impl TrainSummary {
    pub fn initial(&self) -> &EpochRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("baseline row always present")
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join(FINAL_CKPT)
    }
    pub fn best_ckpt(&self) -> PathBuf {
        self.dir.join(BEST_CKPT)
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join(CONFIG_FILE)
    }
}

/// Trains at the configured precision and writes checkpoints, the log and
/// the resolved configuration into `out`.
pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    out: &Path,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, samples, out, progress),
        Precision::F64 => train_as::<f64>(cfg, samples, out, progress),
    }
}

fn ensure_finite<T: Scalar>(what: &str, name: &str, t: &Tensor<T>) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.f64().is_finite()) {
        bail!("non-finite {what} in `{name}` at element {i}");
    }
    Ok(())
}

pub fn train_as<T: Scalar>(
    cfg: &RunConfig,
    samples: &[Sample],
    out: &Path,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        bail!("training set is empty");
    }
    let t = &cfg.train;
    let data = frames::<T>(samples)?;
    let (net, mut store) = HtmNet::init::<T>(&cfg.model, t.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: t.lr,
            betas: t.betas,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
        &store,
    );

    let paths = RunPaths::new(out);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(paths.config(), cfg.to_text()).with_context(|| format!("writing {}", paths.config().display()))?;
    let log_path = paths.log();
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{LOG_HEADER}")?;

    let per_epoch = data.len().div_ceil(t.batch_size);
    let total_steps = if t.steps > 0 { t.steps } else { t.epochs * per_epoch };
    let epochs = total_steps.div_ceil(per_epoch);

    let mut rows = Vec::with_capacity(epochs + 1);
    let mut best: Option<(f64, usize)> = None;
    let mut record = |epoch: usize, store: &ParamStore<T>, log: &mut BufWriter<File>| -> Result<EpochRow> {
        let eval = evaluate(&net, store, &data, cfg, cfg.scope)?;
        let row = EpochRow { epoch, eval };
        writeln!(log, "{}", row.csv())?;
        log.flush()?;
        let rmse = row.eval.report.rmse;
        if best.is_none_or(|(b, _)| rmse < b) {
            best = Some((rmse, epoch));
            checkpoint::save(&paths.best_ckpt(), store)?;
        }
        Ok(row)
    };

    let baseline = record(0, &store, &mut log)?;
    progress(&baseline);
    rows.push(baseline);

    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut images = 0;
    let mut seconds = 0.0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(t.batch_size) {
            if step == total_steps {
                break;
            }
            let parts: Vec<&Frame<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Frame::stack(&parts)?;
            let started = Instant::now();
            let tape = Tape::new();
            let watched = tape.watch_all(store.values())?;
            let pred = net
                .forward(&watched, &batch.rgb, &batch.depth)
                .with_context(|| format!("forward pass of step {}", step + 1))?;
            let loss = depth_loss(&pred, &batch.gt, &batch.mask, &cfg.loss)
                .with_context(|| format!("loss of step {}", step + 1))?;
            tape.backward(&loss)?;
            let grads: Vec<Option<Tensor<T>>> = watched.iter().map(|w| tape.grad(w)).collect();
            for (name, g) in store.names().iter().zip(&grads) {
                if let Some(g) = g {
                    ensure_finite("gradient", name, g).with_context(|| format!("step {}", step + 1))?;
                }
            }
            opt.step(&mut store, &grads);
            for (name, p) in store.iter() {
                ensure_finite("parameter", name, p).with_context(|| format!("step {}", step + 1))?;
            }
            seconds += started.elapsed().as_secs_f64();
            images += chunk.len();
            step += 1;
        }
        let row = record(epoch, &store, &mut log)?;
        progress(&row);
        rows.push(row);
    }
    checkpoint::save(&paths.final_ckpt(), &store)?;
    let best_epoch = best.map_or(0, |(_, e)| e);
    Ok(TrainSummary {
        rows,
        steps: step,
        best_epoch,
        seconds,
        throughput: if seconds > 0.0 { images as f64 / seconds } else { 0.0 },
    })
}

/// Builds the network described by `cfg` and loads `ckpt` into it.
pub fn load_model<T: Scalar>(cfg: &RunConfig, ckpt: &Path) -> Result<(HtmNet, ParamStore<T>)> {
    let (net, mut store) = HtmNet::init::<T>(&cfg.model, 0)?;
    checkpoint::load(ckpt, &mut store).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((net, store))
}
