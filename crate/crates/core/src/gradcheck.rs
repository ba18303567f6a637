//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which scalars of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    /// Every scalar of every input.
    All,
    /// At most this many scalars per input, chosen by a fixed-seed draw.
    Sample(usize),
}

/// Relative error used throughout: `|a − n| / max(1, |a|, |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares tape gradients of `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`. Non-scalar outputs are reduced with a
/// fixed pseudo-random cotangent so every output element contributes.
/// Returns the maximum relative error over all probed input scalars.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_probed(f, inputs, eps, Probe::All)
}

pub fn grad_check_probed<F>(f: F, inputs: &[Tensor<f64>], eps: f64, probe: Probe) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_each(f, inputs, eps, &vec![probe; inputs.len()])
}

/// Like [`grad_check_probed`] with a separate probe choice per input.
pub fn grad_check_each<F>(f: F, inputs: &[Tensor<f64>], eps: f64, probes: &[Probe]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if probes.len() != inputs.len() {
        return Err(Error::GradCheck(format!(
            "{} probe choices for {} inputs",
            probes.len(),
            inputs.len()
        )));
    }
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::GradCheck(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let base: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    let y0 = f(&base)?;
    let y1 = f(&base)?;
    if !y0.bit_eq(&y1) {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let cot: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let cot_t = Tensor::new(y0.shape(), cot.clone())?;

    let tape = Tape::new();
    let tracked = tape.watch_all(&base)?;
    let y = f(&tracked)?;
    let loss = y.mul(&cot_t)?.sum()?;
    tape.backward(&loss)?;

    let mut worst: f64 = 0.0;
    for (k, (input, t)) in base.iter().zip(&tracked).enumerate() {
        let analytic = tape
            .grad(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let coords: Vec<usize> = match probes[k] {
            Probe::All => (0..input.numel()).collect(),
            Probe::Sample(m) if m >= input.numel() => (0..input.numel()).collect(),
            Probe::Sample(m) => (0..m).map(|_| rng.gen_range(0..input.numel())).collect(),
        };
        for i in coords {
            let eval = |x: f64| -> Result<Vec<f64>> {
                let mut v = input.to_vec();
                v[i] = x;
                let mut args = base.clone();
                args[k] = Tensor::new(input.shape(), v)?;
                Ok(f(&args)?.to_vec())
            };
            // Divide by the step actually representable around x.
            let (xp, xm) = (input.data()[i] + eps, input.data()[i] - eps);
            let (yp, ym) = (eval(xp)?, eval(xm)?);
            let diff: f64 = yp.iter().zip(&ym).zip(&cot).map(|((p, m), c)| c * (p - m)).sum();
            let numeric = diff / (xp - xm);
            worst = worst.max(rel_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
