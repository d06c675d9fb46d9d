use serde::{Deserialize, Serialize};

use super::EvalError;

pub const THRESHOLD: f64 = 1.25;

/// Depth accuracy summary. Percentages are in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub pct_below_1_25: f64,
    pub pct_below_1_25_sq: f64,
    pub pct_below_1_25_cube: f64,
    /// `mean |d_p - d_gt|`.
    pub mean_absolute_error: f64,
    /// `mean |d_p - d_gt| / d_gt`.
    pub mean_relative_error: f64,
}

impl DepthMetricsReport {
    pub fn is_monotone(&self) -> bool {
        self.pct_below_1_25 <= self.pct_below_1_25_sq && self.pct_below_1_25_sq <= self.pct_below_1_25_cube
    }
}

/// Threshold accuracies at 1.25, 1.25² and 1.25³ on the ratio
/// `max(d_gt / d_p, d_p / d_gt)`, plus absolute and relative error.
pub fn depth_metrics(gt: &[f64], pred: &[f64]) -> Result<DepthMetricsReport, EvalError> {
    if gt.len() != pred.len() {
        return Err(EvalError::ShapeMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(EvalError::Config("depth maps are empty".into()));
    }
    for (index, &value) in gt.iter().chain(pred).enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(EvalError::NonPositiveDepth {
                index: index % gt.len(),
                value,
            });
        }
    }
    let thresholds = [THRESHOLD, THRESHOLD * THRESHOLD, THRESHOLD * THRESHOLD * THRESHOLD];
    let mut below = [0usize; 3];
    let (mut abs_sum, mut rel_sum) = (0.0, 0.0);
    for (&d, &p) in gt.iter().zip(pred) {
        let ratio = (d / p).max(p / d);
        for (count, t) in below.iter_mut().zip(thresholds) {
            if ratio < t {
                *count += 1;
            }
        }
        let err = (p - d).abs();
        abs_sum += err;
        rel_sum += err / d;
    }
    let n = gt.len() as f64;
    let pct = |c: usize| 100.0 * c as f64 / n;
    let report = DepthMetricsReport {
        pct_below_1_25: pct(below[0]),
        pct_below_1_25_sq: pct(below[1]),
        pct_below_1_25_cube: pct(below[2]),
        mean_absolute_error: abs_sum / n,
        mean_relative_error: rel_sum / n,
    };
    debug_assert!(report.is_monotone());
    Ok(report)
}
