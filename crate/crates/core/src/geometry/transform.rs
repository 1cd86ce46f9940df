use crate::cloud::{Point3, PointCloud};
use crate::geometry::{GeometryError, Mat3, Vec3};
use crate::scalar::Real;

/// Rotation followed by translation: `p' = R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    /// Builds a transform after checking orthonormality and det(R) = +1.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self, GeometryError> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_yaw(yaw: T, t: Vec3<T>) -> Self {
        Self { rotation: Mat3::rot_z(yaw), translation: t }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let tol = if std::mem::size_of::<T>() == 4 { 1e-5 } else { 1e-9 };
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        let ortho = rtr.max_abs_diff(&Mat3::identity()).as_f64();
        let det = self.rotation.det().as_f64();
        if !self.rotation.is_finite() || !self.translation.is_finite() || ortho > tol || (det - 1.0).abs() > tol {
            return Err(GeometryError::InvalidRotation { orthogonality_error: ortho, det });
        }
        Ok(())
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_point(&self, p: &Point3<T>) -> Point3<T> {
        p.with_pos(self.apply(p.pos()))
    }

    /// Rotates a direction without translating it.
    pub fn apply_dir(&self, d: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(d)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }

    /// Rotation angle (radians) and translation norm of `self⁻¹ ∘ other`.
    pub fn error_to(&self, other: &Self) -> (T, T) {
        let d = self.inverse().compose(other);
        (d.rotation.rotation_angle(), d.translation.norm())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let dt = self.translation - other.translation;
        self.rotation.max_abs_diff(&other.rotation).max(dt.x.abs()).max(dt.y.abs()).max(dt.z.abs())
    }
}

/// Maps every point through `t`; intensity, timestamp and order are preserved.
pub fn apply_transform<T: Real>(t: &RigidTransform<T>, cloud: &PointCloud<T>) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        timestamp_ns: cloud.timestamp_ns,
    }
}

/// `compose(t1, t2)` applies `t2` then `t1`.
pub fn compose<T: Real>(t1: &RigidTransform<T>, t2: &RigidTransform<T>) -> RigidTransform<T> {
    t1.compose(t2)
}

pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    t.inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = Mat3::axis_angle(axis, rng.random_range(-3.0..3.0));
        let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        RigidTransform::new(r, t).unwrap()
    }

    #[test]
    fn identity_leaves_cloud_untouched() {
        let cloud = PointCloud::new(vec![Point3::new(1.0, -2.0, 3.5, 0.25), Point3::new(0.0, 0.0, 0.0, 1.0)], 17);
        assert_eq!(apply_transform(&RigidTransform::identity(), &cloud), cloud);
    }

    #[test]
    fn translation_and_yaw() {
        let cloud = PointCloud::from_points(vec![Point3::xyz(0.0, 0.0, 0.0)]);
        let t = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(apply_transform(&t, &cloud).points[0], Point3::xyz(1.0, 0.0, 0.0));

        let r = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::zero());
        let p = r.apply(Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = RigidTransform::<f64>::identity();
        assert_eq!(invert(&id), id);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(compose(&id, &t).max_abs_diff(&t) < 1e-15);
            assert!(compose(&invert(&t), &t).max_abs_diff(&id) < 1e-9);
            let u = random_transform(&mut rng);
            let p = Vec3::new(0.3, -1.2, 4.0);
            assert!((compose(&t, &u).apply(p) - t.apply(u.apply(p))).norm() < 1e-9);
        }
    }

    #[test]
    fn isometry_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_transform(&mut rng);
        let pts: Vec<Point3<f64>> = (0..50)
            .map(|_| Point3::xyz(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0)))
            .collect();
        let cloud = PointCloud::from_points(pts);
        let out = apply_transform(&t, &cloud);
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                let d0 = (cloud.points[i].pos() - cloud.points[j].pos()).norm();
                let d1 = (out.points[i].pos() - out.points[j].pos()).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_reflection() {
        let mut m = Mat3::<f64>::identity();
        m.m[2][2] = -1.0;
        assert!(RigidTransform::new(m, Vec3::zero()).is_err());
    }
}
