//! Depth error statistics: Abs Rel, Sq Rel, RMSE, RMSLog and δ accuracies.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,rms_log,d1,d2,d3";

/// δ thresholds `1.25, 1.25², 1.25³`.
pub const THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

/// δ values are percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rms_log, self.delta1, self.delta2, self.delta3
        )
    }

    pub fn deltas(&self) -> [f64; 3] {
        [self.delta1, self.delta2, self.delta3]
    }
}

impl fmt::Display for DepthMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>9} {:>9} {:>9} {:>9} | {:>7} {:>7} {:>7}", "abs_rel", "sq_rel", "rmse", "rms_log", "d1", "d2", "d3")?;
        write!(
            f,
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4} | {:>7.2} {:>7.2} {:>7.2}",
            self.abs_rel, self.sq_rel, self.rmse, self.rms_log, self.delta1, self.delta2, self.delta3
        )
    }
}

/// Running sums over valid pixels, so a whole split can be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    pub count: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    hits: [usize; 3],
}

impl MetricSums {
    /// Adds every pixel where `mask > 0`.
    pub fn add<T: Real>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
        pred.same_shape(gt, "evaluate")?;
        pred.same_shape(mask, "evaluate")?;
        for (q, ((&p, &g), &m)) in pred.data().iter().zip(gt.data()).zip(mask.data()).enumerate() {
            if m <= T::zero() {
                continue;
            }
            let (d, t) = (p.as_f64(), g.as_f64());
            if !(d > 0.0 && t > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "depth must be positive on the mask: flat index {q} has pred {d}, gt {t}"
                )));
            }
            let diff = d - t;
            self.abs_rel += diff.abs() / t;
            self.sq_rel += diff * diff / t;
            self.sq += diff * diff;
            self.sq_log += (d.ln() - t.ln()).powi(2);
            let ratio = (t / d).max(d / t);
            for (h, thr) in self.hits.iter_mut().zip(THRESHOLDS) {
                *h += usize::from(ratio < thr);
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &MetricSums) {
        self.count += o.count;
        self.abs_rel += o.abs_rel;
        self.sq_rel += o.sq_rel;
        self.sq += o.sq;
        self.sq_log += o.sq_log;
        for (a, b) in self.hits.iter_mut().zip(o.hits) {
            *a += b;
        }
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("evaluation mask is empty".into()));
        }
        let n = self.count as f64;
        let pct = |h: usize| 100.0 * h as f64 / n;
        Ok(DepthMetrics {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rms_log: (self.sq_log / n).sqrt(),
            delta1: pct(self.hits[0]),
            delta2: pct(self.hits[1]),
            delta3: pct(self.hits[2]),
        })
    }
}

pub fn evaluate<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, valid_mask: &Tensor<T>) -> Result<DepthMetrics> {
    let mut s = MetricSums::default();
    s.add(pred, gt, valid_mask)?;
    s.finish()
}
