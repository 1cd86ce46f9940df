//! Confidence rectification and (distance-variant, IoU-weighted) NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bev_iou_unchecked, Box3D, GeometryError};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostprocessError {
    #[error("invalid NMS parameters: {0}")]
    InvalidParams(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: Box3D<T>,
    pub class_id: usize,
    pub score: T,
    pub predicted_iou: T,
    pub rectified_score: T,
    /// BEV range of the box center from the sensor origin.
    pub distance: T,
}

impl<T: Real> Detection<T> {
    /// Detection whose rectified score starts equal to the raw score.
    pub fn new(bbox: Box3D<T>, class_id: usize, score: T, predicted_iou: T) -> Result<Self, PostprocessError> {
        bbox.validate()?;
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(score) || !unit(predicted_iou) {
            return Err(PostprocessError::InvalidDetection(format!("score {score} / iou {predicted_iou} outside [0, 1]")));
        }
        Ok(Self { bbox, class_id, score, predicted_iou, rectified_score: score, distance: bbox.bev_distance() })
    }

    pub fn rectified(mut self, beta: T) -> Self {
        self.rectified_score = rectify_confidence(self.score, self.predicted_iou, beta);
        self
    }

    pub fn cast<U: Real>(&self) -> Detection<U> {
        let c = |v: T| U::lit(v.as_f64());
        Detection {
            bbox: self.bbox.cast(),
            class_id: self.class_id,
            score: c(self.score),
            predicted_iou: c(self.predicted_iou),
            rectified_score: c(self.rectified_score),
            distance: c(self.distance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    Standard,
    DiNms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsParams {
    pub mode: NmsMode,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    /// Confidence-function exponent on the predicted IoU.
    pub beta: f64,
    pub sigma_near: f64,
    pub sigma_far: f64,
    pub d_max: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self::kitti()
    }
}

impl NmsParams {
    pub fn kitti() -> Self {
        Self { mode: NmsMode::DiNms, iou_threshold: 0.3, score_threshold: 0.3, beta: 0.5, sigma_near: 0.01, sigma_far: 1.0, d_max: 60.0 }
    }

    /// Highway roadside setting: low score threshold and NMS IoU 0.2.
    pub fn a9() -> Self {
        Self { iou_threshold: 0.2, score_threshold: 0.1, ..Self::kitti() }
    }

    /// As [`NmsParams::a9`] with the stricter NMS IoU of 0.1.
    pub fn a9_strict() -> Self {
        Self { iou_threshold: 0.1, ..Self::a9() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kitti" => Some(Self::kitti()),
            "a9" => Some(Self::a9()),
            "a9-strict" => Some(Self::a9_strict()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), PostprocessError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.iou_threshold) || !unit(self.score_threshold) || !unit(self.beta) {
            return Err(PostprocessError::InvalidParams("thresholds and beta must lie in [0, 1]".into()));
        }
        if !(self.sigma_near > 0.0) || !(self.sigma_far >= self.sigma_near) || !self.sigma_far.is_finite() {
            return Err(PostprocessError::InvalidParams(format!(
                "need 0 < sigma_near ({}) ≤ sigma_far ({})",
                self.sigma_near, self.sigma_far
            )));
        }
        if !(self.d_max > 0.0) {
            return Err(PostprocessError::InvalidParams(format!("d_max {} must be positive", self.d_max)));
        }
        Ok(())
    }

    /// Weight bandwidth at range `d`.
    pub fn sigma_at(&self, d: f64) -> f64 {
        self.sigma_near + (self.sigma_far - self.sigma_near) * (d / self.d_max).clamp(0.0, 1.0)
    }
}

/// `score^(1−β) · iou^β`.
pub fn rectify_confidence<T: Real>(score: T, predicted_iou: T, beta: T) -> T {
    if beta == T::zero() {
        return score;
    }
    if beta == T::one() {
        return predicted_iou;
    }
    score.powf(T::one() - beta) * predicted_iou.powf(beta)
}

/// Greedy NMS result: indices of kept detections (selection order) and, for
/// each kept one, the indices it suppressed.
struct Clusters {
    kept: Vec<usize>,
    members: Vec<Vec<usize>>,
}

fn greedy_clusters<T: Real>(dets: &[Detection<T>], iou_threshold: T, score_threshold: T) -> Clusters {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].rectified_score >= score_threshold).collect();
    order.sort_by(|&a, &b| dets[b].rectified_score.partial_cmp(&dets[a].rectified_score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut alive = vec![true; order.len()];
    let mut out = Clusters { kept: Vec::new(), members: Vec::new() };
    for i in 0..order.len() {
        if !alive[i] {
            continue;
        }
        let k = order[i];
        let mut members = vec![k];
        for j in i + 1..order.len() {
            if alive[j] && dets[order[j]].class_id == dets[k].class_id && bev_iou_unchecked(&dets[k].bbox, &dets[order[j]].bbox) >= iou_threshold {
                alive[j] = false;
                members.push(order[j]);
            }
        }
        out.kept.push(k);
        out.members.push(members);
    }
    out
}

/// Per-class greedy NMS by descending rectified score (ties to the lower
/// index). Detections below `score_threshold` are dropped first.
pub fn standard_nms<T: Real>(dets: &[Detection<T>], iou_threshold: T, score_threshold: T) -> Vec<Detection<T>> {
    greedy_clusters(dets, iou_threshold, score_threshold).kept.into_iter().map(|i| dets[i]).collect()
}

/// Same suppression as [`standard_nms`]; every kept box is then replaced by
/// the IoU-weighted average of its cluster, with weights flattening as the
/// kept box gets farther from the sensor.
pub fn di_nms<T: Real>(dets: &[Detection<T>], params: &NmsParams) -> Result<Vec<Detection<T>>, PostprocessError> {
    params.validate()?;
    let c = greedy_clusters(dets, T::lit(params.iou_threshold), T::lit(params.score_threshold));
    c.kept
        .iter()
        .zip(&c.members)
        .map(|(&k, members)| {
            let head = dets[k];
            if members.len() == 1 {
                return Ok(head);
            }
            let sigma = T::lit(params.sigma_at(head.distance.as_f64()));
            let mut acc = [T::zero(); 6];
            let (mut s, mut co, mut wsum) = (T::zero(), T::zero(), T::zero());
            for &m in members {
                let b = &dets[m].bbox;
                let iou = if m == k { T::one() } else { bev_iou_unchecked(&head.bbox, b) };
                let w = (-(T::one() - iou).powi(2) / sigma).exp();
                for (a, v) in acc.iter_mut().zip([b.cx, b.cy, b.cz, b.l, b.w, b.h]) {
                    *a = *a + w * v;
                }
                s = s + w * b.yaw.sin();
                co = co + w * b.yaw.cos();
                wsum = wsum + w;
            }
            let a = acc.map(|v| v / wsum);
            let yaw = if s == T::zero() && co == T::zero() { head.bbox.yaw } else { s.atan2(co) };
            let bbox = Box3D::new(a[0], a[1], a[2], a[3], a[4], a[5], yaw)?;
            Ok(Detection { bbox, distance: bbox.bev_distance(), ..head })
        })
        .collect()
}

/// Rectifies all scores with `params.beta`, then runs the configured NMS.
pub fn postprocess<T: Real>(dets: &[Detection<T>], params: &NmsParams) -> Result<Vec<Detection<T>>, PostprocessError> {
    params.validate()?;
    let beta = T::lit(params.beta);
    let rect: Vec<Detection<T>> = dets.iter().map(|d| d.rectified(beta)).collect();
    match params.mode {
        NmsMode::Standard => Ok(standard_nms(&rect, T::lit(params.iou_threshold), T::lit(params.score_threshold))),
        NmsMode::DiNms => di_nms(&rect, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bev_iou;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, yaw: f64, score: f64) -> Detection<f64> {
        Detection::new(Box3D::new(cx, cy, 0.0, 4.0, 2.0, 1.5, yaw).unwrap(), 0, score, 1.0).unwrap()
    }

    #[test]
    fn rectify_examples() {
        assert_eq!(rectify_confidence(0.37, 0.9, 0.0), 0.37);
        assert!((rectify_confidence(0.6, 0.6, 0.3) - 0.6f64).abs() < 1e-15);
        assert!((rectify_confidence(0.81, 0.25, 0.5) - 0.45f64).abs() < 1e-15);
        assert!(rectify_confidence(0.5, 0.3, 0.5) < rectify_confidence(0.6, 0.3, 0.5));
    }

    #[test]
    fn nms_basic_cases() {
        let one = vec![det(1.0, 1.0, 0.0, 0.5)];
        assert_eq!(standard_nms(&one, 0.3, 0.3), one);
        let two = vec![det(1.0, 1.0, 0.0, 0.5), det(1.0, 1.0, 0.0, 0.8)];
        assert_eq!(standard_nms(&two, 0.3, 0.3), vec![two[1]]);
        let tie = vec![det(1.0, 1.0, 0.0, 0.5), det(1.0, 1.0, 0.0, 0.5)];
        assert_eq!(standard_nms(&tie, 0.3, 0.0), vec![tie[0]]);
        assert!(standard_nms(&one, 0.3, 0.6).is_empty());
        // other classes never suppress each other
        let mut other = two.clone();
        other[0].class_id = 1;
        assert_eq!(standard_nms(&other, 0.3, 0.3).len(), 2);
    }

    #[test]
    fn di_nms_singletons_and_identical_clusters() {
        let p = NmsParams { sigma_near: 0.5, sigma_far: 0.5, ..NmsParams::kitti() };
        let spread = vec![det(0.0, 0.0, 0.1, 0.9), det(10.0, 0.0, 0.2, 0.8)];
        assert_eq!(di_nms(&spread, &p).unwrap(), spread);
        let same = vec![det(3.0, 4.0, 0.7, 0.9), det(3.0, 4.0, 0.7, 0.6), det(3.0, 4.0, 0.7, 0.5)];
        let out = di_nms(&same, &p).unwrap();
        assert_eq!(out.len(), 1);
        let (a, b) = (out[0].bbox.to_array(), same[0].bbox.to_array());
        for i in 0..7 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn far_boxes_average_uniformly() {
        let p = NmsParams { sigma_near: 0.01, sigma_far: 1e9, d_max: 60.0, ..NmsParams::kitti() };
        let dets = vec![det(80.0, 0.0, 0.0, 0.9), det(80.4, 0.2, 0.05, 0.7), det(79.7, -0.1, -0.05, 0.6)];
        let out = di_nms(&dets, &p).unwrap();
        assert_eq!(out.len(), 1);
        let mx = dets.iter().map(|d| d.bbox.cx).sum::<f64>() / 3.0;
        let my = dets.iter().map(|d| d.bbox.cy).sum::<f64>() / 3.0;
        assert!((out[0].bbox.cx - mx).abs() < 1e-3 && (out[0].bbox.cy - my).abs() < 1e-3);
        // near the sensor the head box dominates
        let near: Vec<_> = dets.iter().map(|d| Detection { bbox: d.bbox.with_center(d.bbox.center() - crate::Vec3::new(78.0, 0.0, 0.0)), ..*d }).collect();
        let near: Vec<_> = near.iter().map(|d| Detection { distance: d.bbox.bev_distance(), ..*d }).collect();
        let out = di_nms(&near, &p).unwrap();
        assert!((out[0].bbox.cx - near[0].bbox.cx).abs() < (mx - 78.0 - near[0].bbox.cx).abs());
    }

    #[test]
    fn yaw_average_wraps() {
        let p = NmsParams { sigma_near: 1e6, sigma_far: 1e6, ..NmsParams::kitti() };
        let pi = std::f64::consts::PI;
        let dets = vec![det(0.0, 0.0, pi - 0.01, 0.9), det(0.0, 0.0, -pi + 0.01, 0.8)];
        let out = di_nms(&dets, &p).unwrap();
        assert!((out[0].bbox.yaw.abs() - pi).abs() < 1e-6);
    }

    fn oracle(dets: &[Detection<f64>], thr: f64, score_thr: f64) -> Vec<usize> {
        let mut removed = vec![false; dets.len()];
        for (i, d) in dets.iter().enumerate() {
            removed[i] = d.rectified_score < score_thr;
        }
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if !removed[i] && best.is_none_or(|b| dets[i].rectified_score > dets[b].rectified_score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            removed[b] = true;
            for j in 0..dets.len() {
                if !removed[j] && dets[j].class_id == dets[b].class_id && bev_iou(&dets[b].bbox, &dets[j].bbox).unwrap() >= thr {
                    removed[j] = true;
                }
            }
        }
        kept
    }

    #[test]
    fn standard_nms_matches_oracle_and_di_nms_keeps_same_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let dets: Vec<Detection<f64>> = (0..120)
                .map(|_| {
                    let b = Box3D::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), 0.0, 4.0, 2.0, 1.5, rng.random_range(-3.0..3.0)).unwrap();
                    let mut d = Detection::new(b, rng.random_range(0..2), rng.random_range(0.0f64..1.0), 1.0).unwrap();
                    d.rectified_score = (d.score * 20.0).round() / 20.0; // force ties
                    d
                })
                .collect();
            let kept = standard_nms(&dets, 0.3, 0.2);
            let want: Vec<_> = oracle(&dets, 0.3, 0.2).into_iter().map(|i| dets[i]).collect();
            assert_eq!(kept, want);
            let p = NmsParams { iou_threshold: 0.3, score_threshold: 0.2, ..NmsParams::kitti() };
            assert_eq!(di_nms(&dets, &p).unwrap().len(), kept.len());
            for a in 0..kept.len() {
                for b in a + 1..kept.len() {
                    assert!(kept[a].class_id != kept[b].class_id || bev_iou(&kept[a].bbox, &kept[b].bbox).unwrap() < 0.3);
                }
            }
        }
    }

    #[test]
    fn params_validation_and_presets() {
        NmsParams::kitti().validate().unwrap();
        assert_eq!(NmsParams::a9().score_threshold, 0.1);
        assert_eq!(NmsParams::a9().iou_threshold, 0.2);
        assert_eq!(NmsParams::a9_strict().iou_threshold, 0.1);
        assert!(NmsParams { sigma_near: 2.0, sigma_far: 1.0, ..NmsParams::kitti() }.validate().is_err());
        assert!(NmsParams { iou_threshold: 1.5, ..NmsParams::kitti() }.validate().is_err());
        assert!(Detection::new(Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(), 0, 1.2, 0.5).is_err());
    }
}
