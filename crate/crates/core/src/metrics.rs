//! Scribble Ratio, mIoU and orientation error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::moments::axis_difference;

/// Fraction of scribble cells covered by the object mask.
pub fn scribble_ratio(scribble: &Mask, object: &Mask) -> Result<f64> {
    scribble.check_same_shape(object)?;
    if scribble.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(scribble.intersection_count(object)? as f64 / scribble.count() as f64)
}

/// Intersection over union; 1 when both masks are empty.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let union = pred.union_count(gt)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_count(gt)? as f64 / union as f64)
}

/// Smallest angle between two undirected axes, in degrees within `[0, 90]`.
pub fn orientation_error(theta_a: f64, theta_b: f64) -> f64 {
    axis_difference(theta_a, theta_b).abs().to_degrees().min(90.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScribbleReport {
    pub tokens: Vec<String>,
    pub ratio: f64,
    pub orientation_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// Mean over scribbles.
    pub scribble_ratio: f64,
    /// Covered scribble cells over all scribble cells.
    pub scribble_ratio_pooled: f64,
    pub miou: f64,
    pub orientation_error_deg: f64,
    pub per_scribble: Vec<ScribbleReport>,
}

/// One scribble's region with the decoded and ground-truth object it should match.
#[derive(Debug, Clone)]
pub struct ScribbleEval<'a> {
    pub tokens: &'a [String],
    pub scribble: &'a Mask,
    pub predicted: &'a Mask,
    pub truth: &'a Mask,
    pub predicted_theta: f64,
    pub target_theta: f64,
}

impl EvalReport {
    pub fn from_scribbles(items: &[ScribbleEval<'_>]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyScribbleSet);
        }
        let mut per_scribble = Vec::with_capacity(items.len());
        let (mut covered, mut cells) = (0usize, 0usize);
        let mut iou = 0.0;
        for it in items {
            let ratio = scribble_ratio(it.scribble, it.predicted)?;
            covered += it.scribble.intersection_count(it.predicted)?;
            cells += it.scribble.count();
            iou += miou(it.predicted, it.truth)?;
            per_scribble.push(ScribbleReport {
                tokens: it.tokens.to_vec(),
                ratio,
                orientation_error_deg: orientation_error(it.predicted_theta, it.target_theta),
            });
        }
        let n = items.len() as f64;
        Ok(Self {
            scribble_ratio: per_scribble.iter().map(|p| p.ratio).sum::<f64>() / n,
            scribble_ratio_pooled: covered as f64 / cells as f64,
            miou: iou / n,
            orientation_error_deg: per_scribble.iter().map(|p| p.orientation_error_deg).sum::<f64>() / n,
            per_scribble,
        })
    }
}
