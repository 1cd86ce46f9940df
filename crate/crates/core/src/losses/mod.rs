//! Training losses, student–teacher consistency and the EMA teacher update.
//!
//! Only values and analytic gradients are provided; there is no optimizer.

mod audit;
mod terms;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou_3d_unchecked;
use crate::io::ModelWeights;
use crate::postprocess::Detection;
use crate::scalar::{normalize_angle, Real};
use crate::tensor::DenseTensor;

pub use audit::{audit_components, AuditParams};
pub use terms::{
    angle_loss, focal_loss, focal_loss_logit, od_iou_loss, sigmoid, smooth_l1, AngleLoss, OdIouLoss, ValueGrad, ANGLE_DELTA,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("invalid loss parameter: {0}")]
    InvalidParams(String),
    #[error("parameter sets differ: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),
}

/// Weights of the student objective:
/// `cls + ω1·od_iou + ω2·dir + λ·iou_pred + μt·consistency`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub omega1: f64,
    pub omega2: f64,
    pub lambda: f64,
    pub mu_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { omega1: 2.0, omega2: 0.2, lambda: 1.0, mu_t: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("omega1", self.omega1), ("omega2", self.omega2), ("lambda", self.lambda), ("mu_t", self.mu_t)] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidParams(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub od_iou: f64,
    pub dir: f64,
    pub iou_pred: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub od_iou: f64,
    pub dir: f64,
    pub iou_pred: f64,
    pub consistency: f64,
    pub total: f64,
}

pub fn student_total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    for (name, v) in [("cls", c.cls), ("od_iou", c.od_iou), ("dir", c.dir), ("iou_pred", c.iou_pred), ("consistency", c.consistency)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(LossBreakdown {
        cls: c.cls,
        od_iou: c.od_iou,
        dir: c.dir,
        iou_pred: c.iou_pred,
        consistency: c.consistency,
        total: c.cls + w.omega1 * c.od_iou + w.omega2 * c.dir + w.lambda * c.iou_pred + w.mu_t * c.consistency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyParams {
    /// Pairs need a 3D IoU strictly above this.
    pub tau_c: f64,
    /// Smooth-L1 transition for box and score residuals.
    pub delta: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self { tau_c: 0.7, delta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency<T> {
    /// `(student index, teacher index)` in matching order.
    pub pairs: Vec<(usize, usize)>,
    pub value: T,
}

/// Greedy one-to-one matching by descending 3D IoU (ties to lower student,
/// then teacher index), followed by the mean smooth-L1 residual over the box
/// parameters (wrapped yaw) and score probabilities of every pair.
pub fn match_and_consistency<T: Real>(student: &[Detection<T>], teacher: &[Detection<T>], params: &ConsistencyParams) -> Consistency<T> {
    let tau = T::lit(params.tau_c);
    let delta = T::lit(params.delta);
    let mut cands: Vec<(T, usize, usize)> = Vec::new();
    for (i, s) in student.iter().enumerate() {
        for (j, t) in teacher.iter().enumerate() {
            let iou = iou_3d_unchecked(&s.bbox, &t.bbox);
            if iou > tau {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut s_used = vec![false; student.len()];
    let mut t_used = vec![false; teacher.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !s_used[i] && !t_used[j] {
            s_used[i] = true;
            t_used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Consistency { pairs, value: T::zero() };
    }
    let mut total = T::zero();
    for &(i, j) in &pairs {
        let (a, b) = (student[i].bbox.to_array(), teacher[j].bbox.to_array());
        for k in 0..6 {
            total = total + smooth_l1(a[k], b[k], delta).value;
        }
        total = total + smooth_l1(normalize_angle(a[6] - b[6]), T::zero(), delta).value;
        total = total + smooth_l1(student[i].score, teacher[j].score, delta).value;
    }
    Consistency { value: total / T::from_count(pairs.len()), pairs }
}

/// `t' = decay·t + (1 − decay)·s` per parameter, computed in `f64`.
pub fn ema_update(teacher: &ModelWeights, student: &ModelWeights, decay: f64) -> Result<ModelWeights, LossError> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(LossError::InvalidParams(format!("decay {decay} outside [0, 1]")));
    }
    if teacher.params.len() != student.params.len() {
        return Err(LossError::ShapeMismatch(format!("{} vs {} tensors", teacher.params.len(), student.params.len())));
    }
    let mut params = std::collections::BTreeMap::new();
    for ((kt, t), (ks, s)) in teacher.params.iter().zip(&student.params) {
        if kt != ks || t.shape() != s.shape() {
            return Err(LossError::ShapeMismatch(format!("{kt} {:?} vs {ks} {:?}", t.shape(), s.shape())));
        }
        let data = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&a, &b)| (decay * a as f64 + (1.0 - decay) * b as f64) as f32)
            .collect();
        params.insert(kt.clone(), DenseTensor::from_vec(t.shape(), data).expect("same shape"));
    }
    Ok(ModelWeights { params, seed: teacher.seed })
}
