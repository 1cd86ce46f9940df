use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::geometry::{GeometryError, RigidTransform, Vec3};
use crate::scalar::{normalize_angle, Real};

/// Oriented 3D box parameterized at its geometric center.
///
/// `yaw` rotates the box's length axis counterclockwise about +z, measured
/// from +x, and is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D<T> {
    pub cx: T,
    pub cy: T,
    pub cz: T,
    pub l: T,
    pub w: T,
    pub h: T,
    pub yaw: T,
}

impl<T: Real> Box3D<T> {
    /// Validated constructor; normalizes `yaw`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(cx: T, cy: T, cz: T, l: T, w: T, h: T, yaw: T) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, cz, l, w, h, yaw: normalize_angle(yaw) };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [T; 7]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn to_array(&self) -> [T; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || self.l <= T::zero() || self.w <= T::zero() || self.h <= T::zero() {
            return Err(GeometryError::InvalidBox {
                l: self.l.as_f64(),
                w: self.w.as_f64(),
                h: self.h.as_f64(),
            });
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3<T> {
        Vec3::new(self.cx, self.cy, self.cz)
    }

    pub fn dims(&self) -> Vec3<T> {
        Vec3::new(self.l, self.w, self.h)
    }

    pub fn with_center(&self, c: Vec3<T>) -> Self {
        Self { cx: c.x, cy: c.y, cz: c.z, ..*self }
    }

    /// Transform from the box's local frame (origin at center, x along length) to the world.
    pub fn local_to_world(&self) -> RigidTransform<T> {
        RigidTransform::from_yaw(self.yaw, self.center())
    }

    /// World point expressed in the box frame.
    pub fn to_local(&self, p: Vec3<T>) -> Vec3<T> {
        let d = p - self.center();
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn to_world(&self, p: Vec3<T>) -> Vec3<T> {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * p.x - s * p.y + self.cx, s * p.x + c * p.y + self.cy, p.z + self.cz)
    }

    /// Boundary points count as inside.
    pub fn contains(&self, p: Vec3<T>) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= self.l * T::half() && q.y.abs() <= self.w * T::half() && q.z.abs() <= self.h * T::half()
    }

    /// BEV footprint corners in counterclockwise order.
    pub fn bev_corners(&self) -> [[T; 2]; 4] {
        let (hl, hw) = (self.l * T::half(), self.w * T::half());
        let (s, c) = self.yaw.sin_cos();
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [c * u - s * v + self.cx, s * u + c * v + self.cy])
    }

    pub fn corners(&self) -> [Vec3<T>; 8] {
        let bev = self.bev_corners();
        let (lo, hi) = (self.cz - self.h * T::half(), self.cz + self.h * T::half());
        let mut out = [Vec3::zero(); 8];
        for (i, [x, y]) in bev.into_iter().enumerate() {
            out[i] = Vec3::new(x, y, lo);
            out[i + 4] = Vec3::new(x, y, hi);
        }
        out
    }

    pub fn bev_area(&self) -> T {
        self.l * self.w
    }

    pub fn volume(&self) -> T {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> T {
        self.cz - self.h * T::half()
    }

    pub fn z_max(&self) -> T {
        self.cz + self.h * T::half()
    }

    /// Horizontal distance of the center from the frame origin.
    pub fn bev_distance(&self) -> T {
        (self.cx * self.cx + self.cy * self.cy).sqrt()
    }

    pub fn cast<U: Real>(&self) -> Box3D<U> {
        let a = self.to_array().map(|v| U::lit(v.as_f64()));
        Box3D { cx: a[0], cy: a[1], cz: a[2], l: a[3], w: a[4], h: a[5], yaw: a[6] }
    }
}

/// Indices (ascending) of the points inside `b`, boundary included.
pub fn points_in_box<T: Real>(cloud: &PointCloud<T>, b: &Box3D<T>) -> Vec<usize> {
    let r2 = (b.l * b.l + b.w * b.w + b.h * b.h) * T::lit(0.25);
    let c = b.center();
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let d = p.pos() - c;
            d.norm_sq() <= r2 * T::lit(1.000001) && b.contains(p.pos())
        })
        .map(|(i, _)| i)
        .collect()
}
