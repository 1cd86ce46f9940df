use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::geometry::Vec3;
use crate::preprocess::PreprocessError;
use crate::scalar::Real;

/// Plane `normal · p + d = 0` with a unit normal oriented toward +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel<T> {
    pub normal: Vec3<T>,
    pub d: T,
}

impl<T: Real> PlaneModel<T> {
    /// Plane through three points; `None` when they are (nearly) collinear.
    pub fn through(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Option<Self> {
        let n = (b - a).cross(c - a);
        let scale = (b - a).norm() * (c - a).norm();
        if !(n.norm() > scale * T::lit(1e-9)) {
            return None;
        }
        let mut n = n.normalized()?;
        if n.z < T::zero() || (n.z == T::zero() && (n.y < T::zero() || (n.y == T::zero() && n.x < T::zero()))) {
            n = -n;
        }
        Some(Self { normal: n, d: -n.dot(a) })
    }

    pub fn signed_distance(&self, p: Vec3<T>) -> T {
        self.normal.dot(p) + self.d
    }
}

/// RANSAC plane fit. Hypotheses are random point triples; the winner has the
/// most inliers (`|residual| ≤ inlier_eps`), ties going to the lower mean
/// absolute residual. Deterministic for a given seed.
pub fn ransac_ground_plane<T: Real>(
    cloud: &PointCloud<T>,
    iterations: usize,
    inlier_eps: T,
    seed: u64,
) -> Result<(PlaneModel<T>, Vec<usize>), PreprocessError> {
    let n = cloud.len();
    if n < 3 {
        return Err(PreprocessError::TooFewPoints { needed: 3, got: n });
    }
    let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x.as_f64(), p.y.as_f64(), p.z.as_f64()]).collect();
    let eps = inlier_eps.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(PlaneModel<f64>, usize, f64)> = None;
    for _ in 0..iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        let (lo, hi) = (i.min(j), i.max(j));
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let v = |q: usize| Vec3::from_array(pts[q]);
        let Some(plane) = PlaneModel::through(v(i), v(j), v(k)) else {
            continue;
        };
        let (nx, ny, nz, d) = (plane.normal.x, plane.normal.y, plane.normal.z, plane.d);
        let mut count = 0usize;
        let mut resid = 0.0f64;
        for p in &pts {
            let r = (nx * p[0] + ny * p[1] + nz * p[2] + d).abs();
            if r <= eps {
                count += 1;
                resid += r;
            }
        }
        let mean = resid / count.max(1) as f64;
        let better = match &best {
            None => true,
            Some((_, bc, bm)) => count > *bc || (count == *bc && mean < *bm),
        };
        if better {
            best = Some((plane, count, mean));
        }
    }
    let (plane, _, _) = best.ok_or(PreprocessError::NoPlane)?;
    let inliers = pts
        .iter()
        .enumerate()
        .filter(|(_, p)| (plane.normal.dot(Vec3::from_array(**p)) + plane.d).abs() <= eps)
        .map(|(i, _)| i)
        .collect();
    Ok((PlaneModel { normal: plane.normal.cast(), d: T::lit(plane.d) }, inliers))
}

/// Keeps points whose absolute plane residual exceeds `eps`, in order.
pub fn remove_ground<T: Real>(cloud: &PointCloud<T>, plane: &PlaneModel<T>, eps: T) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().filter(|p| plane.signed_distance(p.pos()).abs() > eps).copied().collect(),
        timestamp_ns: cloud.timestamp_ns,
    }
}
