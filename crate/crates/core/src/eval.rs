//! One-pass evaluation: distance precision and success-plot AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::BBox;

/// Center-error threshold of the distance precision, in pixels.
pub const DP_THRESHOLD: f64 = 20.0;

/// Overlap thresholds `0.00, 0.01, …, 1.00`.
pub const SUCCESS_STEPS: usize = 101;

/// Euclidean distance between box centers.
pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    (pred.cx - gt.cx).hypot(pred.cy - gt.cy)
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let overlap = |ac: f64, al: f64, bc: f64, bl: f64| {
        let lo = (ac - al / 2.0).max(bc - bl / 2.0);
        let hi = (ac + al / 2.0).min(bc + bl / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h);
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_STEPS - 1) as f64
}

/// Per-frame errors and the curves derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeCurves {
    pub center_errors: Vec<f64>,
    pub overlaps: Vec<f64>,
    /// Fraction of frames with IoU at least each threshold.
    pub success: Vec<f64>,
    /// Distance precision at [`DP_THRESHOLD`].
    pub precision: f64,
    /// Mean of `success`.
    pub auc: f64,
}

impl OpeCurves {
    fn from_errors(center_errors: Vec<f64>, overlaps: Vec<f64>) -> Result<Self> {
        if center_errors.is_empty() {
            return Err(Error::InvalidInput("no frames to evaluate".into()));
        }
        let n = overlaps.len() as f64;
        let success: Vec<f64> = (0..SUCCESS_STEPS)
            .map(|i| {
                let t = success_threshold(i);
                overlaps.iter().filter(|&&o| o >= t).count() as f64 / n
            })
            .collect();
        let auc = success.iter().sum::<f64>() / SUCCESS_STEPS as f64;
        Ok(OpeCurves {
            precision: precision_at(&center_errors, DP_THRESHOLD),
            center_errors,
            overlaps,
            success,
            auc,
        })
    }

    pub fn mean_center_error(&self) -> f64 {
        self.center_errors.iter().sum::<f64>() / self.center_errors.len() as f64
    }

    /// `DP@20=<v> AUC=<v>`.
    pub fn summary(&self) -> String {
        format!("DP@20={:.4} AUC={:.4}", self.precision, self.auc)
    }

    /// `threshold,success` rows of the success curve.
    pub fn success_csv(&self) -> String {
        let mut s = String::from("threshold,success\n");
        for (i, v) in self.success.iter().enumerate() {
            writeln!(s, "{:.2},{v:.6}", success_threshold(i)).expect("writing to string");
        }
        s
    }

    pub fn write_success_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.success_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of center errors at most `threshold`.
pub fn precision_at(center_errors: &[f64], threshold: f64) -> f64 {
    center_errors.iter().filter(|&&e| e <= threshold).count() as f64 / center_errors.len().max(1) as f64
}

/// Precision and success curves of one tracked sequence, frame 0 included.
pub fn ope_curves(preds: &[BBox], gts: &[BBox]) -> Result<OpeCurves> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted boxes for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    let ce = preds.iter().zip(gts).map(|(p, g)| center_error(p, g)).collect();
    let ov = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect();
    OpeCurves::from_errors(ce, ov)
}

/// Curves over the pooled frames of several sequences.
pub fn pooled(runs: &[&OpeCurves]) -> Result<OpeCurves> {
    let ce = runs.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
    let ov = runs.iter().flat_map(|r| r.overlaps.iter().copied()).collect();
    OpeCurves::from_errors(ce, ov)
}

/// Pooled curves per scenario tag, plus `all` over every run.
pub fn aggregate_by_tag(runs: &[(Vec<String>, OpeCurves)]) -> Result<BTreeMap<String, OpeCurves>> {
    let mut groups: BTreeMap<String, Vec<&OpeCurves>> = BTreeMap::new();
    for (tags, c) in runs {
        groups.entry("all".into()).or_default().push(c);
        for t in tags {
            groups.entry(t.clone()).or_default().push(c);
        }
    }
    groups.into_iter().map(|(k, v)| Ok((k, pooled(&v)?))).collect()
}
