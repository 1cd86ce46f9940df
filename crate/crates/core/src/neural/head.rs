//! Detection head, anchors and box decoding.
//!
//! Anchors sit at the centers of the head's output cells (twice the pillar
//! size). Anchor `a = class · R + r` has yaw `r · π / R`. Channel layouts per
//! cell: class logits `a·K + k`, box residuals `a·7 + j`, direction logits
//! `a·2 + d` (class 1 means yaw ≥ 0) and one IoU logit per anchor.

use serde::{Deserialize, Serialize};

use super::ops::{conv2d, sigmoid};
use super::{param, ArchitectureConfig, NeuralError};
use crate::geometry::Box3D;
use crate::io::ModelWeights;
use crate::postprocess::Detection;
use crate::preprocess::PillarGridConfig;
use crate::scalar::normalize_angle;
use crate::tensor::DenseTensor;

const LOG_CLAMP: f64 = 20.0;

/// Head outputs on the `H × W` feature grid.
#[derive(Debug, Clone)]
pub struct RawPredictions {
    pub cls: DenseTensor,
    pub boxes: DenseTensor,
    pub dir: DenseTensor,
    pub iou: DenseTensor,
    pub num_anchors: usize,
    pub num_classes: usize,
}

impl RawPredictions {
    pub fn height(&self) -> usize {
        self.cls.dim(1)
    }

    pub fn width(&self) -> usize {
        self.cls.dim(2)
    }

    pub fn all_finite(&self) -> bool {
        self.cls.all_finite() && self.boxes.all_finite() && self.dir.all_finite() && self.iou.all_finite()
    }

    /// Zeroed predictions of the right shapes.
    pub fn zeros(num_anchors: usize, num_classes: usize, h: usize, w: usize) -> Self {
        Self {
            cls: DenseTensor::zeros(&[num_anchors * num_classes, h, w]),
            boxes: DenseTensor::zeros(&[num_anchors * 7, h, w]),
            dir: DenseTensor::zeros(&[num_anchors * 2, h, w]),
            iou: DenseTensor::zeros(&[num_anchors, h, w]),
            num_anchors,
            num_classes,
        }
    }

    fn at(t: &DenseTensor, ch: usize, y: usize, x: usize) -> f32 {
        t.data()[(ch * t.dim(1) + y) * t.dim(2) + x]
    }

    pub fn set(t: &mut DenseTensor, ch: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (t.dim(1), t.dim(2));
        t.data_mut()[(ch * h + y) * w + x] = v;
    }
}

pub fn head_forward(features: &DenseTensor, w: &ModelWeights, cfg: &ArchitectureConfig) -> Result<RawPredictions, NeuralError> {
    let conv = |name: &str| conv2d(features, param(w, &format!("head.{name}.weight"))?, param(w, &format!("head.{name}.bias"))?, 1, 0);
    let out = RawPredictions {
        cls: conv("cls")?,
        boxes: conv("box")?,
        dir: conv("dir")?,
        iou: conv("iou")?,
        num_anchors: cfg.num_anchors(),
        num_classes: cfg.num_classes,
    };
    if out.cls.dim(0) != cfg.num_anchors() * cfg.num_classes {
        return Err(NeuralError::Shape(format!("head emits {} class channels for {} anchors", out.cls.dim(0), cfg.num_anchors())));
    }
    Ok(out)
}

/// All anchors of an `h × w` output grid, indexed `(y · w + x) · A + a`.
pub fn anchor_boxes(cfg: &ArchitectureConfig, grid: &PillarGridConfig, h: usize, w: usize) -> Vec<Box3D<f64>> {
    let r = cfg.anchors_per_cell;
    let (sx, sy) = (grid.pillar_size_x * 2.0, grid.pillar_size_y * 2.0);
    let mut out = Vec::with_capacity(h * w * cfg.num_anchors());
    for y in 0..h {
        let cy = grid.y_range[0] + (y as f64 + 0.5) * sy;
        for x in 0..w {
            let cx = grid.x_range[0] + (x as f64 + 0.5) * sx;
            for spec in &cfg.anchors {
                for k in 0..r {
                    let yaw = k as f64 * std::f64::consts::PI / r as f64;
                    let [l, wd, ht] = spec.size;
                    out.push(Box3D { cx, cy, cz: spec.z_center, l, w: wd, h: ht, yaw });
                }
            }
        }
    }
    out
}

/// Residuals of `gt` relative to `anchor`.
pub fn encode_box(gt: &Box3D<f64>, anchor: &Box3D<f64>) -> [f64; 7] {
    let diag = anchor.l.hypot(anchor.w);
    [
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        gt.yaw - anchor.yaw,
    ]
}

/// Inverse of [`encode_box`]; log-size residuals are clamped to ±20.
pub fn decode_box(d: &[f64; 7], anchor: &Box3D<f64>) -> Box3D<f64> {
    let diag = anchor.l.hypot(anchor.w);
    let ex = |v: f64| v.clamp(-LOG_CLAMP, LOG_CLAMP).exp();
    Box3D {
        cx: anchor.cx + d[0] * diag,
        cy: anchor.cy + d[1] * diag,
        cz: anchor.cz + d[2] * anchor.h,
        l: anchor.l * ex(d[3]),
        w: anchor.w * ex(d[4]),
        h: anchor.h * ex(d[5]),
        yaw: normalize_angle(anchor.yaw + d[6]),
    }
}

/// Applies the direction classifier: flips by π only when the logits strictly
/// favor the half-plane the decoded yaw is not in.
pub fn apply_direction(yaw: f64, dir_logits: [f32; 2]) -> f64 {
    let yaw = normalize_angle(yaw);
    let current = usize::from(yaw >= 0.0);
    if dir_logits[1 - current] > dir_logits[current] {
        normalize_angle(yaw + std::f64::consts::PI)
    } else {
        yaw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Minimum class probability for a candidate.
    pub score_threshold: f64,
    /// Candidates kept (highest score first) before box decoding.
    pub max_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, max_candidates: 4096 }
    }
}

/// Turns raw head outputs into scored boxes. Class is the argmax over class
/// logits, score its sigmoid, and the IoU logit is mapped from [-1, 1] to
/// [0, 1] and clamped.
pub fn decode_detections(raw: &RawPredictions, cfg: &ArchitectureConfig, grid: &PillarGridConfig, dc: &DecodeConfig) -> Result<Vec<Detection<f64>>, NeuralError> {
    let (a_n, k_n) = (raw.num_anchors, raw.num_classes);
    if a_n != cfg.num_anchors() || k_n != cfg.num_classes {
        return Err(NeuralError::Shape(format!("predictions for {a_n}×{k_n}, config has {}×{}", cfg.num_anchors(), cfg.num_classes)));
    }
    let (h, w) = (raw.height(), raw.width());
    let anchors = anchor_boxes(cfg, grid, h, w);
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for a in 0..a_n {
                let mut best = (f32::NEG_INFINITY, 0);
                for k in 0..k_n {
                    let v = RawPredictions::at(&raw.cls, a * k_n + k, y, x);
                    if v > best.0 {
                        best = (v, k);
                    }
                }
                let score = sigmoid(best.0) as f64;
                if score >= dc.score_threshold && score.is_finite() {
                    cand.push((score, (y * w + x) * a_n + a, best.1));
                }
            }
        }
    }
    cand.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    cand.truncate(dc.max_candidates);

    let mut out = Vec::with_capacity(cand.len());
    for (score, idx, class_id) in cand {
        let (a, cell) = (idx % a_n, idx / a_n);
        let (y, x) = (cell / w, cell % w);
        let d: [f64; 7] = std::array::from_fn(|j| RawPredictions::at(&raw.boxes, a * 7 + j, y, x) as f64);
        if d.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mut b = decode_box(&d, &anchors[idx]);
        b.yaw = apply_direction(b.yaw, [RawPredictions::at(&raw.dir, a * 2, y, x), RawPredictions::at(&raw.dir, a * 2 + 1, y, x)]);
        let iou_raw = RawPredictions::at(&raw.iou, a, y, x) as f64;
        let iou = if iou_raw.is_finite() { ((iou_raw + 1.0) / 2.0).clamp(0.0, 1.0) } else { 0.0 };
        let det = Detection::new(b, class_id, score.clamp(0.0, 1.0), iou).map_err(|e| NeuralError::Shape(e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}
