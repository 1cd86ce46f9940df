use crate::geometry::{iou_3d, Box3D, GeometryError, Vec3};
use crate::scalar::{normalize_angle, Real};

/// Smooth-L1 transition used by the sine-error angle loss.
pub const ANGLE_DELTA: f64 = 1.0 / 9.0;

/// A loss value and its derivative with respect to the prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueGrad<T> {
    pub value: T,
    pub grad: T,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Focal loss `−α_t (1 − p_t)^γ log p_t` of probability `p` for a binary
/// target; `grad` is taken with respect to the logit of `p`.
pub fn focal_loss<T: Real>(p: T, positive: bool, alpha: T, gamma: T) -> ValueGrad<T> {
    let (pt, at, sign) = if positive { (p, alpha, T::one()) } else { (T::one() - p, T::one() - alpha, -T::one()) };
    let q = T::one() - pt;
    let log_pt = pt.ln();
    let mod_f = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
    ValueGrad {
        value: -at * mod_f * log_pt,
        grad: sign * at * mod_f * (gamma * pt * log_pt - q),
    }
}

/// [`focal_loss`] evaluated at `sigmoid(logit)`.
pub fn focal_loss_logit<T: Real>(logit: T, positive: bool, alpha: T, gamma: T) -> ValueGrad<T> {
    focal_loss(sigmoid(logit), positive, alpha, gamma)
}

/// `0.5 e²/δ` for `|e| < δ`, `|e| − 0.5 δ` beyond; `e = pred − target`.
pub fn smooth_l1<T: Real>(pred: T, target: T, delta: T) -> ValueGrad<T> {
    let e = pred - target;
    if e.abs() < delta {
        ValueGrad { value: T::half() * e * e / delta, grad: e / delta }
    } else {
        ValueGrad { value: e.abs() - T::half() * delta, grad: e.signum() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleLoss<T> {
    pub value: T,
    /// Derivative with respect to the predicted yaw.
    pub grad: T,
    /// Direction-classifier target: 1 when the ground-truth yaw is ≥ 0.
    pub direction_target: usize,
}

/// Sine-error loss `smooth_l1(sin(θp − θg))`, blind to a flip by π.
pub fn angle_loss<T: Real>(yaw_pred: T, yaw_gt: T) -> AngleLoss<T> {
    let (s, c) = (yaw_pred - yaw_gt).sin_cos();
    let sl = smooth_l1(s, T::zero(), T::lit(ANGLE_DELTA));
    AngleLoss { value: sl.value, grad: sl.grad * c, direction_target: usize::from(yaw_gt >= T::zero()) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdIouLoss<T> {
    pub value: T,
    pub iou: T,
    pub center_term: T,
    pub angle_term: T,
    /// Gradient of the two penalty terms with respect to the predicted box
    /// parameters `[cx, cy, cz, l, w, h, yaw]`, holding the enclosing
    /// diagonal fixed. The IoU term has no gradient.
    pub penalty_grad: [T; 7],
}

/// Orientation-aware distance-IoU loss
/// `1 − IoU₃D + λc‖Δc‖²/diag² + λθ(1 − |cos Δθ|)`.
///
/// `diag` is the diagonal of the smallest box enclosing both boxes whose axes
/// are those of the ground-truth box, which keeps the loss invariant under
/// rigid motions of the pair.
pub fn od_iou_loss<T: Real>(pred: &Box3D<T>, gt: &Box3D<T>, lambda_c: T, lambda_theta: T) -> Result<OdIouLoss<T>, GeometryError> {
    let iou = iou_3d(pred, gt)?;
    let diag2 = enclosing_diag_sq(pred, gt);
    let dc = pred.center() - gt.center();
    let dtheta = normalize_angle(pred.yaw - gt.yaw);
    let (s, c) = dtheta.sin_cos();
    let center_term = lambda_c * dc.norm_sq() / diag2;
    let angle_term = lambda_theta * (T::one() - c.abs());
    let k = T::two() * lambda_c / diag2;
    let yaw_grad = lambda_theta * c.signum() * s;
    Ok(OdIouLoss {
        value: T::one() - iou + center_term + angle_term,
        iou,
        center_term,
        angle_term,
        penalty_grad: [k * dc.x, k * dc.y, k * dc.z, T::zero(), T::zero(), T::zero(), yaw_grad],
    })
}

fn enclosing_diag_sq<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let mut lo = Vec3::new(T::infinity(), T::infinity(), T::infinity());
    let mut hi = -lo;
    for p in a.corners().into_iter().chain(b.corners()) {
        let q = b.to_local(p);
        lo = Vec3::new(lo.x.min(q.x), lo.y.min(q.y), lo.z.min(q.z));
        hi = Vec3::new(hi.x.max(q.x), hi.y.max(q.y), hi.z.max(q.z));
    }
    (hi - lo).norm_sq()
}
