//! Rotated-box overlap via convex polygon clipping.

use crate::geometry::{Box3D, GeometryError};
use crate::scalar::Real;

/// Intersection areas below this (m²) are treated as zero.
pub const AREA_EPS: f64 = 1e-12;

fn cross<T: Real>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counterclockwise order).
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s = s + a[0] * b[1] - a[1] * b[0];
    }
    s * T::half()
}

/// Sutherland–Hodgman: clips `subject` against every edge of the convex,
/// counterclockwise polygon `clip`.
pub fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut out: Vec<[T; 2]> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let (ea, eb) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(ea, eb, cur) >= T::zero();
            let prev_in = cross(ea, eb, prev) >= T::zero();
            if cur_in {
                if !prev_in {
                    out.push(segment_line_intersection(prev, cur, ea, eb));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_line_intersection(prev, cur, ea, eb));
            }
        }
    }
    out
}

fn segment_line_intersection<T: Real>(p: [T; 2], q: [T; 2], a: [T; 2], b: [T; 2]) -> [T; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom == T::zero() {
        return q;
    }
    let t = dp / denom;
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

fn same_footprint<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> bool {
    a.cx == b.cx && a.cy == b.cy && a.l == b.l && a.w == b.w && a.yaw == b.yaw
}

/// BEV intersection area of two boxes that are already known to be valid.
pub(crate) fn bev_intersection_unchecked<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    if same_footprint(a, b) {
        return a.bev_area();
    }
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    let ra = (a.l * a.l + a.w * a.w).sqrt() * T::half();
    let rb = (b.l * b.l + b.w * b.w).sqrt() * T::half();
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return T::zero();
    }
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&poly).abs();
    if area < T::lit(AREA_EPS) {
        T::zero()
    } else {
        area.min(a.bev_area()).min(b.bev_area())
    }
}

pub(crate) fn bev_iou_unchecked<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    if same_footprint(a, b) {
        return T::one();
    }
    let inter = bev_intersection_unchecked(a, b);
    if inter == T::zero() {
        return T::zero();
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).max(T::zero()).min(T::one())
}

pub(crate) fn iou_3d_unchecked<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    if a == b {
        return T::one();
    }
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= T::zero() {
        return T::zero();
    }
    let inter = bev_intersection_unchecked(a, b) * dz;
    if inter == T::zero() {
        return T::zero();
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).max(T::zero()).min(T::one())
}

/// Intersection-over-union of the yaw-rotated BEV rectangles.
pub fn bev_iou<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> Result<T, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(bev_iou_unchecked(a, b))
}

/// Volumetric IoU: BEV intersection × vertical overlap over union volume.
pub fn iou_3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> Result<T, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_3d_unchecked(a, b))
}
