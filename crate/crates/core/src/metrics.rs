//! Depth evaluation metrics accumulated in 64-bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DELTA_THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];
pub const ERROR_MAP_CAP: f64 = 0.25;

/// Which pixels count towards the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricScope {
    /// Transparent or reflective pixels with valid reference depth.
    #[default]
    Mask,
    /// Every pixel with valid reference depth.
    All,
}

impl std::str::FromStr for MetricScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(MetricScope::Mask),
            "all" => Ok(MetricScope::All),
            other => Err(Error::invalid("metric_scope", format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    /// Percentages for thresholds 1.05, 1.10 and 1.25.
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub pixel_count: usize,
}

/// Running sums over any number of depth maps.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    scope: MetricScope,
    count: usize,
    sq: f64,
    abs: f64,
    rel: f64,
    within: [usize; 3],
}

impl MetricAccumulator {
    pub fn new(scope: MetricScope) -> Self {
        MetricAccumulator {
            scope,
            ..Default::default()
        }
    }

    /// Adds pixels of one or more maps; `mask` entries above 0.5 are masked.
    pub fn add<T: Scalar>(&mut self, pred: &[T], gt: &[T], mask: &[T]) -> Result<()> {
        if pred.len() != gt.len() || mask.len() != gt.len() {
            return Err(Error::invalid(
                "metrics",
                format!("lengths differ: pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len()),
            ));
        }
        for ((p, g), m) in pred.iter().zip(gt).zip(mask) {
            let (d, r) = (p.f64(), g.f64());
            if r <= 0.0 || (self.scope == MetricScope::Mask && m.f64() <= 0.5) {
                continue;
            }
            let e = d - r;
            self.count += 1;
            self.sq += e * e;
            self.abs += e.abs();
            self.rel += e.abs() / r;
            if d > 0.0 {
                let ratio = (d / r).max(r / d);
                for (hit, t) in self.within.iter_mut().zip(DELTA_THRESHOLDS) {
                    *hit += usize::from(ratio < t);
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::invalid("metrics", "no pixels to evaluate"));
        }
        let n = self.count as f64;
        let pct = |k: usize| 100.0 * self.within[k] as f64 / n;
        Ok(MetricReport {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            mae: self.abs / n,
            delta_105: pct(0),
            delta_110: pct(1),
            delta_125: pct(2),
            pixel_count: self.count,
        })
    }
}

pub fn metrics<T: Scalar>(pred: &[T], gt: &[T], mask: &[T], scope: MetricScope) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(scope);
    acc.add(pred, gt, mask)?;
    acc.report()
}

/// 8-bit relative-error raster: `min(|d − d*|/d*, cap)/cap` scaled to 0..255
/// on masked pixels with valid reference depth, 0 elsewhere.
pub fn error_map<T: Scalar>(pred: &[T], gt: &[T], mask: &[T], cap: f64) -> Vec<u8> {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .map(|((p, g), m)| {
            let r = g.f64();
            if r <= 0.0 || m.f64() <= 0.5 {
                return 0;
            }
            let e = ((p.f64() - r).abs() / r).min(cap) / cap;
            (e * 255.0).round() as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction() {
        let gt = [1.0, 2.0, 3.5];
        let r = metrics(&gt, &gt, &[1.0; 3], MetricScope::Mask).unwrap();
        assert_eq!((r.rmse, r.rel, r.mae), (0.0, 0.0, 0.0));
        assert_eq!((r.delta_105, r.delta_110, r.delta_125), (100.0, 100.0, 100.0));
        assert_eq!(r.pixel_count, 3);
    }

    #[test]
    fn uniform_twenty_percent_overshoot() {
        let gt = [5.0, 10.0];
        let pred = [6.0, 12.0];
        let r = metrics(&pred, &gt, &[1.0; 2], MetricScope::Mask).unwrap();
        assert_eq!(r.rel, 0.2);
        assert_eq!((r.delta_105, r.delta_110, r.delta_125), (0.0, 0.0, 100.0));
    }

    #[test]
    fn two_pixel_arithmetic() {
        let r = metrics(&[1.0, 1.2], &[1.0, 1.0], &[1.0, 1.0], MetricScope::Mask).unwrap();
        assert!((r.mae - 0.1).abs() < 1e-12);
        assert!((r.rmse - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.delta_105, 50.0);
    }

    #[test]
    fn scope_and_validity_filtering() {
        let gt = [1.0, 0.0, 2.0, 4.0];
        let pred = [1.0, 9.0, 3.0, 4.0];
        let mask = [1.0, 1.0, 0.0, 1.0];
        assert_eq!(metrics(&pred, &gt, &mask, MetricScope::Mask).unwrap().pixel_count, 2);
        let all = metrics(&pred, &gt, &mask, MetricScope::All).unwrap();
        assert_eq!(all.pixel_count, 3);
        assert!(metrics(&pred, &gt, &[0.0; 4], MetricScope::Mask).is_err());
    }

    #[test]
    fn non_positive_prediction_is_never_within_threshold() {
        let r = metrics(&[0.0, -1.0], &[1.0, 1.0], &[1.0, 1.0], MetricScope::Mask).unwrap();
        assert_eq!(r.delta_125, 0.0);
    }

    #[test]
    fn error_map_saturates_and_masks() {
        let gt = [2.0, 2.0, 2.0, 2.0, 0.0];
        let pred = [2.0, 2.25, 3.0, 3.0, 1.0];
        let mask = [1.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(error_map(&pred, &gt, &mask, ERROR_MAP_CAP), vec![0, 128, 255, 0, 0]);
    }

    #[test]
    fn scope_parses() {
        assert_eq!("all".parse::<MetricScope>().unwrap(), MetricScope::All);
        assert!("some".parse::<MetricScope>().is_err());
    }
}
