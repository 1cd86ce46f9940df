//! Loss components of a fixed set of detections against labels, for
//! inspecting the objective without a training loop.

use serde::{Deserialize, Serialize};

use super::terms::{angle_loss, focal_loss, od_iou_loss, smooth_l1, ANGLE_DELTA};
use super::{match_and_consistency, ConsistencyParams, LossComponents, LossError};
use crate::frame::LabeledBox;
use crate::geometry::iou_3d_unchecked;
use crate::postprocess::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditParams {
    /// A detection is positive when matched to a same-class label at this
    /// 3D IoU or above.
    pub positive_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_c: f64,
    pub lambda_theta: f64,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self { positive_iou: 0.5, focal_alpha: 0.25, focal_gamma: 2.0, lambda_c: 1.0, lambda_theta: 1.0 }
    }
}

/// Greedy one-to-one assignment by descending 3D IoU (ties to the lower
/// detection, then label index). Returns `(det, label, iou)`.
fn assign(dets: &[Detection<f64>], gts: &[LabeledBox<f64>], min_iou: f64) -> Vec<(usize, usize, f64)> {
    let mut cands = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            if d.class_id == g.class_id {
                let iou = iou_3d_unchecked(&d.bbox, &g.bbox);
                if iou >= min_iou && iou > 0.0 {
                    cands.push((iou, i, j));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut du, mut gu) = (vec![false; dets.len()], vec![false; gts.len()]);
    let mut out = Vec::new();
    for (iou, i, j) in cands {
        if !du[i] && !gu[j] {
            du[i] = true;
            gu[j] = true;
            out.push((i, j, iou));
        }
    }
    out
}

/// Unweighted components:
/// - `cls`: mean focal loss of every detection's score against its
///   positive/negative assignment;
/// - `od_iou`: mean orientation-aware distance-IoU loss over positives;
/// - `dir`: mean sine-error angle loss over positives;
/// - `iou_pred`: mean smooth-L1 between `2·predicted_iou − 1` and
///   `2·IoU − 1` over positives;
/// - `consistency`: against `teacher` when given, else 0.
///
/// Empty sets contribute 0.
pub fn audit_components(
    dets: &[Detection<f64>],
    gts: &[LabeledBox<f64>],
    teacher: Option<&[Detection<f64>]>,
    consistency: &ConsistencyParams,
    p: &AuditParams,
) -> Result<LossComponents, LossError> {
    if !(p.positive_iou > 0.0 && p.positive_iou <= 1.0) || !(p.focal_alpha >= 0.0 && p.focal_alpha <= 1.0) || !(p.focal_gamma >= 0.0) {
        return Err(LossError::InvalidParams("positive_iou in (0, 1], focal_alpha in [0, 1], focal_gamma ≥ 0".into()));
    }
    let pairs = assign(dets, gts, p.positive_iou);
    let mut positive = vec![false; dets.len()];
    for &(i, _, _) in &pairs {
        positive[i] = true;
    }
    let mean = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
    let cls: f64 = dets.iter().zip(&positive).map(|(d, &pos)| focal_loss(d.score, pos, p.focal_alpha, p.focal_gamma).value).sum();
    let (mut od, mut dir, mut iou_pred) = (0.0, 0.0, 0.0);
    for &(i, j, iou) in &pairs {
        let (d, g) = (&dets[i], &gts[j].bbox);
        od += od_iou_loss(&d.bbox, g, p.lambda_c, p.lambda_theta).map_err(|e| LossError::InvalidParams(e.to_string()))?.value;
        dir += angle_loss(d.bbox.yaw, g.yaw).value;
        iou_pred += smooth_l1(2.0 * d.predicted_iou - 1.0, 2.0 * iou - 1.0, ANGLE_DELTA).value;
    }
    let n = pairs.len();
    let consistency = teacher.map_or(0.0, |t| match_and_consistency(dets, t, consistency).value);
    Ok(LossComponents { cls: mean(cls, dets.len()), od_iou: mean(od, n), dir: mean(dir, n), iou_pred: mean(iou_pred, n), consistency })
}
