//! Point and point-cloud containers.

use crate::geometry::Vec3;
use crate::scalar::Real;

/// A LiDAR return: position in meters and reflectivity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub intensity: T,
}

impl<T: Real> Point3<T> {
    pub fn new(x: T, y: T, z: T, intensity: T) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(x: T, y: T, z: T) -> Self {
        Self::new(x, y, z, T::zero())
    }

    pub fn pos(&self) -> Vec3<T> {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn with_pos(&self, p: Vec3<T>) -> Self {
        Self::new(p.x, p.y, p.z, self.intensity)
    }

    pub fn is_valid(&self) -> bool {
        self.pos().is_finite() && self.intensity >= T::zero() && self.intensity <= T::one()
    }

    pub fn cast<U: Real>(&self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
            U::lit(self.intensity.as_f64()),
        )
    }
}

/// An ordered set of points captured at one instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Point3<T>>,
    /// Capture time, Unix nanoseconds.
    pub timestamp_ns: u64,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>, timestamp_ns: u64) -> Self {
        Self { points, timestamp_ns }
    }

    pub fn from_points(points: Vec<Point3<T>>) -> Self {
        Self { points, timestamp_ns: 0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy of the cloud keeping the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            timestamp_ns: self.timestamp_ns,
        }
    }

    pub fn positions(&self) -> Vec<Vec3<T>> {
        self.points.iter().map(Point3::pos).collect()
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud { points: self.points.iter().map(Point3::cast).collect(), timestamp_ns: self.timestamp_ns }
    }
}
