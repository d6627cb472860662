//! End-point error and outlier percentage.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Absolute outlier threshold in pixels.
pub const OUTLIER_PIXELS: f64 = 3.0;
/// Relative outlier threshold as a fraction of the ground-truth magnitude.
pub const OUTLIER_FRACTION: f64 = 0.05;

/// How the absolute and relative thresholds combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierRule {
    /// Outlier if the error exceeds either threshold.
    PaperOr,
    /// Outlier only if the error exceeds both thresholds (KITTI convention).
    KittiAnd,
}

impl OutlierRule {
    pub const ALL: [OutlierRule; 2] = [OutlierRule::PaperOr, OutlierRule::KittiAnd];

    pub fn is_outlier(self, err: f64, gt_magnitude: f64) -> bool {
        let abs = err > OUTLIER_PIXELS;
        let rel = err > OUTLIER_FRACTION * gt_magnitude;
        match self {
            OutlierRule::PaperOr => abs || rel,
            OutlierRule::KittiAnd => abs && rel,
        }
    }
}

impl fmt::Display for OutlierRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierRule::PaperOr => "paper_or",
            OutlierRule::KittiAnd => "kitti_and",
        })
    }
}

impl FromStr for OutlierRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_or" => Ok(OutlierRule::PaperOr),
            "kitti_and" => Ok(OutlierRule::KittiAnd),
            _ => Err(Error::Config(format!(
                "outlier rule must be `paper_or` or `kitti_and`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMetrics {
    /// Mean end-point error in pixels.
    pub epe: f64,
    /// Outlier percentage in `[0, 100]`.
    pub f1_all: f64,
    pub outlier_rule: OutlierRule,
}

fn errors<'a>(pred: &'a FlowField, gt: &'a FlowField) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.check_same_extent(gt, "flow metrics")?;
    let p = pred.u().data().iter().zip(pred.v().data());
    let g = gt.u().data().iter().zip(gt.v().data());
    Ok(p.zip(g).map(|((pu, pv), (gu, gv))| {
        let err = (pu - gu).hypot(pv - gv);
        (err, gu.hypot(*gv))
    }))
}

/// Mean over pixels of the Euclidean distance between flow vectors.
pub fn compute_epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let n = (gt.height() * gt.width()) as f64;
    Ok(errors(pred, gt)?.map(|(e, _)| e).sum::<f64>() / n)
}

/// Percentage of pixels classified as outliers under `rule`.
pub fn compute_f1_all(pred: &FlowField, gt: &FlowField, rule: OutlierRule) -> Result<f64> {
    let n = (gt.height() * gt.width()) as f64;
    let outliers = errors(pred, gt)?.filter(|&(e, m)| rule.is_outlier(e, m)).count();
    Ok(100.0 * outliers as f64 / n)
}

pub fn evaluate(pred: &FlowField, gt: &FlowField, rule: OutlierRule) -> Result<FlowMetrics> {
    Ok(FlowMetrics {
        epe: compute_epe(pred, gt)?,
        f1_all: compute_f1_all(pred, gt, rule)?,
        outlier_rule: rule,
    })
}
