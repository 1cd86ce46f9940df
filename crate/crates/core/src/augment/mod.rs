//! Shape-aware per-object augmentation and global frame augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Point3, PointCloud};
use crate::frame::LabeledFrame;
use crate::geometry::{points_in_box, Box3D, Vec3};
use crate::preprocess::farthest_point_sample;
use crate::scalar::{normalize_angle, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("invalid augmentation parameter: {0}")]
    InvalidParams(String),
}

/// Face order of the six pyramids: +x, −x, +y, −y, +z, −z (box frame).
pub const FACES: [&str; 6] = ["+x", "-x", "+y", "-y", "+z", "-z"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalAugParams {
    /// Yaw is drawn uniformly from `[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    pub flip_probability: f64,
    pub scale_range: [f64; 2],
}

impl Default for GlobalAugParams {
    fn default() -> Self {
        Self { rotation_range: std::f64::consts::FRAC_PI_4, flip_probability: 0.5, scale_range: [0.95, 1.05] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub p_dropout: f64,
    pub p_swap: f64,
    pub p_sparsify: f64,
    pub sparsify_keep_ratio: f64,
    pub global: GlobalAugParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { p_dropout: 0.25, p_swap: 0.1, p_sparsify: 0.1, sparsify_keep_ratio: 0.5, global: GlobalAugParams::default() }
    }
}

impl AugmentParams {
    /// Every operation disabled.
    pub fn identity() -> Self {
        Self {
            p_dropout: 0.0,
            p_swap: 0.0,
            p_sparsify: 0.0,
            sparsify_keep_ratio: 1.0,
            global: GlobalAugParams { rotation_range: 0.0, flip_probability: 0.0, scale_range: [1.0, 1.0] },
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidParams(m));
        for (name, p) in [
            ("p_dropout", self.p_dropout),
            ("p_swap", self.p_swap),
            ("p_sparsify", self.p_sparsify),
            ("flip_probability", self.global.flip_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.sparsify_keep_ratio > 0.0 && self.sparsify_keep_ratio <= 1.0) {
            return bad(format!("sparsify_keep_ratio {} outside (0, 1]", self.sparsify_keep_ratio));
        }
        let [lo, hi] = self.global.scale_range;
        if !(lo > 0.0 && hi < 2.0 && lo <= hi) {
            return bad(format!("scale range [{lo}, {hi}] must satisfy 0 < lo ≤ hi < 2"));
        }
        if !(self.global.rotation_range >= 0.0 && self.global.rotation_range.is_finite()) {
            return bad(format!("rotation range {} must be finite and ≥ 0", self.global.rotation_range));
        }
        Ok(())
    }
}

/// Pyramid (face index) of a point given in the box frame: the face with
/// the largest signed distance normalized by the half extent. Ties go to the
/// lower face index.
pub fn pyramid_of<T: Real>(local: Vec3<T>, dims: Vec3<T>) -> usize {
    let (hx, hy, hz) = (dims.x * T::half(), dims.y * T::half(), dims.z * T::half());
    let s = [local.x / hx, -local.x / hx, local.y / hy, -local.y / hy, local.z / hz, -local.z / hz];
    let mut best = 0;
    for f in 1..6 {
        if s[f] > s[best] {
            best = f;
        }
    }
    best
}

/// Splits the in-box points into the six pyramids whose apex is the box
/// center and whose bases are the faces. Index lists are ascending.
pub fn pyramid_partition<T: Real>(b: &Box3D<T>, cloud: &PointCloud<T>) -> [Vec<usize>; 6] {
    let mut sets: [Vec<usize>; 6] = Default::default();
    for i in points_in_box(cloud, b) {
        sets[pyramid_of(b.to_local(cloud.points[i].pos()), b.dims())].push(i);
    }
    sets
}

/// Maps a point from box `from` to the same normalized position in box `to`.
fn remap<T: Real>(p: &Point3<T>, from: &Box3D<T>, to: &Box3D<T>) -> Point3<T> {
    let q = from.to_local(p.pos());
    let unit = |v: T, half: T| (v / half).max(-T::one()).min(T::one());
    let n = Vec3::new(unit(q.x, from.l * T::half()), unit(q.y, from.w * T::half()), unit(q.z, from.h * T::half()));
    let local = Vec3::new(n.x * to.l * T::half(), n.y * to.w * T::half(), n.z * to.h * T::half());
    p.with_pos(to.to_world(local))
}

/// Per box and pyramid, in box then face order, three uniforms are drawn:
/// dropout, swap and sparsify. A dropped pyramid skips the other two. Swap
/// exchanges the pyramid's points with the same pyramid of a uniformly chosen
/// same-class box that currently has points there, remapping both ways.
/// Sparsify keeps `ceil(n · keep_ratio)` points by farthest point sampling.
///
/// A point inside several boxes belongs to the lowest-index one. Points of
/// untouched pyramids and points outside all boxes keep their original order;
/// points of modified pyramids follow in box, face order. Boxes are never
/// changed.
pub fn shape_aware_augment<T: Real>(frame: &LabeledFrame<T>, params: &AugmentParams, seed: u64) -> Result<LabeledFrame<T>, AugmentError> {
    params.validate()?;
    let cloud = &frame.cloud;
    let nb = frame.boxes.len();
    let mut owner = vec![usize::MAX; cloud.len()];
    let mut sets: Vec<[Vec<Point3<T>>; 6]> = Vec::with_capacity(nb);
    for (k, lb) in frame.boxes.iter().enumerate() {
        let mut s: [Vec<Point3<T>>; 6] = Default::default();
        for i in points_in_box(cloud, &lb.bbox) {
            if owner[i] != usize::MAX {
                continue;
            }
            let f = pyramid_of(lb.bbox.to_local(cloud.points[i].pos()), lb.bbox.dims());
            owner[i] = k * 6 + f;
            s[f].push(cloud.points[i]);
        }
        sets.push(s);
    }
    let mut modified = vec![false; nb * 6];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..nb {
        for f in 0..6 {
            let (u_drop, u_swap, u_sparse): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            if u_drop < params.p_dropout {
                sets[k][f].clear();
                modified[k * 6 + f] = true;
                continue;
            }
            if u_swap < params.p_swap {
                let class = frame.boxes[k].class_id;
                let partners: Vec<usize> =
                    (0..nb).filter(|&j| j != k && frame.boxes[j].class_id == class && !sets[j][f].is_empty()).collect();
                if !partners.is_empty() {
                    let j = partners[rng.random_range(0..partners.len())];
                    let (bk, bj) = (&frame.boxes[k].bbox, &frame.boxes[j].bbox);
                    let into_k: Vec<_> = sets[j][f].iter().map(|p| remap(p, bj, bk)).collect();
                    let into_j: Vec<_> = sets[k][f].iter().map(|p| remap(p, bk, bj)).collect();
                    sets[k][f] = into_k;
                    sets[j][f] = into_j;
                    modified[k * 6 + f] = true;
                    modified[j * 6 + f] = true;
                }
            }
            if u_sparse < params.p_sparsify && !sets[k][f].is_empty() {
                let n = sets[k][f].len();
                let keep = ((n as f64 * params.sparsify_keep_ratio).ceil() as usize).clamp(1, n);
                if keep < n {
                    let pos: Vec<Vec3<T>> = sets[k][f].iter().map(Point3::pos).collect();
                    let mut pick = farthest_point_sample(&pos, keep, 0).expect("1 ≤ keep ≤ n");
                    pick.sort_unstable();
                    sets[k][f] = pick.into_iter().map(|i| sets[k][f][i]).collect();
                    modified[k * 6 + f] = true;
                }
            }
        }
    }
    let mut points: Vec<Point3<T>> =
        cloud.points.iter().zip(&owner).filter(|(_, &o)| o == usize::MAX || !modified[o]).map(|(p, _)| *p).collect();
    for (k, s) in sets.iter().enumerate() {
        for f in 0..6 {
            if modified[k * 6 + f] {
                points.extend_from_slice(&s[f]);
            }
        }
    }
    Ok(LabeledFrame { frame_id: frame.frame_id.clone(), cloud: PointCloud::new(points, cloud.timestamp_ns), boxes: frame.boxes.clone() })
}

/// Similarity transform applied as: mirror y, rotate about +z, then scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform<T> {
    pub rotation: T,
    pub flip: bool,
    pub scale: T,
}

impl<T: Real> GlobalTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: T::zero(), flip: false, scale: T::one() }
    }

    pub fn sample(params: &GlobalAugParams, rng: &mut impl Rng) -> Self {
        let u_rot: f64 = rng.random();
        let u_flip: f64 = rng.random();
        let u_scale: f64 = rng.random();
        let [lo, hi] = params.scale_range;
        Self {
            rotation: T::lit((2.0 * u_rot - 1.0) * params.rotation_range),
            flip: u_flip < params.flip_probability,
            scale: T::lit(lo + (hi - lo) * u_scale),
        }
    }

    pub fn apply_point(&self, p: Vec3<T>) -> Vec3<T> {
        let y = if self.flip { -p.y } else { p.y };
        let (s, c) = self.rotation.sin_cos();
        Vec3::new((c * p.x - s * y) * self.scale, (s * p.x + c * y) * self.scale, p.z * self.scale)
    }

    pub fn apply_box(&self, b: &Box3D<T>) -> Box3D<T> {
        let c = self.apply_point(b.center());
        let yaw = if self.flip { -b.yaw } else { b.yaw };
        Box3D {
            cx: c.x,
            cy: c.y,
            cz: c.z,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: normalize_angle(yaw + self.rotation),
        }
    }

    pub fn apply_frame(&self, frame: &LabeledFrame<T>) -> LabeledFrame<T> {
        let mut out = frame.clone();
        for p in &mut out.cloud.points {
            *p = p.with_pos(self.apply_point(p.pos()));
        }
        for b in &mut out.boxes {
            b.bbox = self.apply_box(&b.bbox);
        }
        out
    }
}

/// Draws one [`GlobalTransform`] from `seed` and applies it to points and boxes.
pub fn global_augment<T: Real>(frame: &LabeledFrame<T>, params: &AugmentParams, seed: u64) -> Result<LabeledFrame<T>, AugmentError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GlobalTransform::sample(&params.global, &mut rng).apply_frame(frame))
}

/// Shape-aware then global augmentation, with independent streams from one seed.
pub fn augment_frame<T: Real>(frame: &LabeledFrame<T>, params: &AugmentParams, seed: u64) -> Result<LabeledFrame<T>, AugmentError> {
    let shaped = shape_aware_augment(frame, params, seed)?;
    global_augment(&shaped, params, seed ^ 0x9e37_79b9_7f4a_7c15)
}
