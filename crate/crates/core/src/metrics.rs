//! Segmentation, density and counting metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 100;

/// One evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub mse: f64,
    pub mae: f64,
    pub chi2: f64,
    pub gt_count: f64,
    pub pred_count: f64,
    /// `None` when the ground-truth count is zero.
    pub diff_pct: Option<f64>,
}

impl MetricsReport {
    /// Computes every metric from flat per-pixel arrays.
    pub fn compute(pred_mask: &[u8], gt_mask: &[u8], pred_density: &[f32], gt_density: &[f32]) -> Result<Self> {
        let (iou, precision, recall) = segmentation_metrics(pred_mask, gt_mask)?;
        let (mse, mae) = density_errors(pred_density, gt_density)?;
        let chi2 = chi2_distance(pred_density, gt_density, DEFAULT_BINS)?;
        let (gt_count, pred_count, diff_pct) = count_and_diff(pred_density, gt_density)?;
        Ok(Self {
            iou,
            precision,
            recall,
            mse,
            mae,
            chi2,
            gt_count,
            pred_count,
            diff_pct,
        })
    }

    /// Flat `key=value` lines; an undefined difference prints as `none`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let fields = [
            ("iou", self.iou),
            ("precision", self.precision),
            ("recall", self.recall),
            ("mse", self.mse),
            ("mae", self.mae),
            ("chi2", self.chi2),
            ("gt_count", self.gt_count),
            ("pred_count", self.pred_count),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k}={v}");
        }
        match self.diff_pct {
            Some(d) => {
                let _ = writeln!(s, "diff_pct={d}");
            }
            None => s.push_str("diff_pct=none\n"),
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} predicted vs {b} reference pixels")));
    }
    Ok(())
}

/// IoU, precision and recall of the object class (`1`).
///
/// Empty denominators: two empty masks agree perfectly (all 1.0); an empty
/// prediction against a non-empty reference has precision 0.
pub fn segmentation_metrics(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    check_len("segmentation_metrics", pred.len(), gt.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(Error::invalid("segmentation masks must be binary"));
        }
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    let iou = ratio(tp, tp + fp + fn_, 1.0);
    let precision = ratio(tp, tp + fp, if fn_ == 0 { 1.0 } else { 0.0 });
    // no reference objects: nothing was missed
    let recall = ratio(tp, tp + fn_, 1.0);
    Ok((iou, precision, recall))
}

/// Per-pixel mean squared and mean absolute error on raw values.
pub fn density_errors(pred: &[f32], gt: &[f32]) -> Result<(f64, f64)> {
    check_len("density_errors", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("density errors over zero pixels"));
    }
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(gt) {
        let d = p as f64 - g as f64;
        se += d * d;
        ae += d.abs();
    }
    let n = pred.len() as f64;
    Ok((se / n, ae / n))
}

/// Raw-count histograms of both maps on shared uniform bins over
/// `[0, max of both]`, after clipping negatives to 0.
pub fn shared_histograms(pred: &[f32], gt: &[f32], bins: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    check_len("chi2_distance", pred.len(), gt.len())?;
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let clip = |v: f32| (v as f64).max(0.0);
    let max = pred
        .iter()
        .chain(gt)
        .map(|&v| clip(v))
        .fold(0.0f64, f64::max);
    let bin = |v: f32| -> usize {
        if max <= 0.0 {
            0
        } else {
            ((clip(v) / max * bins as f64) as usize).min(bins - 1)
        }
    };
    let mut h = vec![0u64; bins];
    let mut g = vec![0u64; bins];
    for &v in pred {
        h[bin(v)] += 1;
    }
    for &v in gt {
        g[bin(v)] += 1;
    }
    Ok((h, g))
}

/// `sum_i (h_i - g_i)^2 / (h_i + g_i)` over unnormalized histograms; empty
/// bins contribute nothing.
pub fn chi2_distance(pred: &[f32], gt: &[f32], bins: usize) -> Result<f64> {
    let (h, g) = shared_histograms(pred, gt, bins)?;
    Ok(h.iter()
        .zip(&g)
        .filter(|(&a, &b)| a + b > 0)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d / (a + b) as f64
        })
        .sum())
}

/// Object counts (sums of densities clipped at 0) and the signed percentage
/// difference of the prediction from the reference.
pub fn count_and_diff(pred: &[f32], gt: &[f32]) -> Result<(f64, f64, Option<f64>)> {
    check_len("count_and_diff", pred.len(), gt.len())?;
    let count = |v: &[f32]| v.iter().map(|&x| (x as f64).max(0.0)).sum::<f64>();
    let (g, p) = (count(gt), count(pred));
    Ok((g, p, diff_pct(g, p)))
}

/// `100 (pred - gt) / gt`, undefined for a zero reference.
pub fn diff_pct(gt_count: f64, pred_count: f64) -> Option<f64> {
    (gt_count != 0.0).then(|| 100.0 * (pred_count - gt_count) / gt_count)
}
