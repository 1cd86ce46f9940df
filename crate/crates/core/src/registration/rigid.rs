use crate::geometry::{symmetric_eigen, Mat3, RigidTransform, Vec3};
use crate::registration::RegistrationError;
use crate::scalar::Real;

/// Least-squares rigid transform mapping each source point onto its target.
///
/// Centroids are removed, the 3×3 cross-covariance `H = Σ s·tᵀ` is decomposed
/// as `U·Σ·Vᵀ`, and `R = V·diag(1, 1, d)·Uᵀ` with `d` chosen so det(R) = +1.
pub fn estimate_rigid<T: Real>(pairs: &[(Vec3<T>, Vec3<T>)]) -> Result<RigidTransform<T>, RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::Degenerate(format!("{} correspondences, need at least 3", pairs.len())));
    }
    let n = T::from_count(pairs.len());
    let (mut cs, mut ct) = (Vec3::zero(), Vec3::zero());
    for (s, t) in pairs {
        cs = cs + *s;
        ct = ct + *t;
    }
    cs = cs / n;
    ct = ct / n;
    let mut h = Mat3::zero();
    for (s, t) in pairs {
        let (a, b) = (*s - cs, *t - ct);
        for i in 0..3 {
            for j in 0..3 {
                h.m[i][j] = h.m[i][j] + a[i] * b[j];
            }
        }
    }
    let r = kabsch_rotation(&h)?;
    let t = ct - r.mul_vec(cs);
    Ok(RigidTransform { rotation: r, translation: t })
}

/// Proper rotation maximizing tr(R·H).
fn kabsch_rotation<T: Real>(h: &Mat3<T>) -> Result<Mat3<T>, RegistrationError> {
    // Right singular vectors and singular values from HᵀH.
    let hth = h.transpose().mul_mat(h);
    let (vals, v) = symmetric_eigen(&hth);
    let s0 = vals[0].max(T::zero()).sqrt();
    let s1 = vals[1].max(T::zero()).sqrt();
    if !(s0 > T::zero()) || s1 <= s0 * T::lit(1e-7).max(T::epsilon() * T::lit(64.0)) {
        return Err(RegistrationError::Degenerate("correspondences are collinear or coincident".into()));
    }
    let u0 = (h.mul_vec(v.col(0)) / s0).normalized().expect("nonzero singular value");
    let mut u1 = h.mul_vec(v.col(1)) / s1;
    u1 = (u1 - u0 * u0.dot(u1)).normalized().ok_or_else(|| RegistrationError::Degenerate("rank-deficient covariance".into()))?;
    let u2 = u0.cross(u1);
    let u = Mat3::from_cols(u0, u1, u2);
    let mut d = Mat3::identity();
    d.m[2][2] = v.det().signum();
    Ok(v.mul_mat(&d).mul_mat(&u.transpose()))
}
