//! Read-only KITTI label converter.
//!
//! KITTI boxes live in the camera frame (x right, y down, z forward) and are
//! anchored at the bottom-face center. They are moved to the geometric center,
//! mapped through a caller-supplied camera→LiDAR transform, and the heading is
//! re-derived in the LiDAR frame.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::frame::{ClassList, LabeledBox};
use crate::geometry::{Box3D, RigidTransform, Vec3};
use crate::io::IoError;
use crate::scalar::Real;

/// Parses KITTI label text. `class_map` merges KITTI type names into configured
/// class names (e.g. `Van → Car`); types that map to no configured class are skipped.
pub fn parse_kitti_labels<T: Real>(
    text: &str,
    cam_to_lidar: &RigidTransform<T>,
    classes: &ClassList,
    class_map: &BTreeMap<String, String>,
) -> Result<Vec<LabeledBox<T>>, IoError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() < 15 {
            return Err(IoError::InvalidValue(format!("line {}: expected ≥ 15 fields, got {}", lineno + 1, f.len())));
        }
        let name = class_map.get(f[0]).map(String::as_str).unwrap_or(f[0]);
        let Some(class_id) = classes.id_of(name) else {
            continue;
        };
        let num = |i: usize| -> Result<T, IoError> {
            f[i].parse::<f64>()
                .map(T::lit)
                .map_err(|_| IoError::InvalidValue(format!("line {}: bad number {:?}", lineno + 1, f[i])))
        };
        let (h, w, l) = (num(8)?, num(9)?, num(10)?);
        let bottom = Vec3::new(num(11)?, num(12)?, num(13)?);
        let ry = num(14)?;
        let center_cam = bottom - Vec3::new(T::zero(), h * T::half(), T::zero());
        let c = cam_to_lidar.apply(center_cam);
        let heading = cam_to_lidar.apply_dir(Vec3::new(ry.cos(), T::zero(), -ry.sin()));
        let yaw = heading.y.atan2(heading.x);
        let bbox = Box3D::new(c.x, c.y, c.z, l, w, h, yaw)?;
        out.push(LabeledBox { bbox, class_id, instance_id: format!("{}", out.len()) });
    }
    Ok(out)
}

pub fn read_kitti_labels<T: Real>(
    path: impl AsRef<Path>,
    cam_to_lidar: &RigidTransform<T>,
    classes: &ClassList,
    class_map: &BTreeMap<String, String>,
) -> Result<Vec<LabeledBox<T>>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_kitti_labels(&text, cam_to_lidar, classes, class_map)
}

/// The nominal KITTI axis permutation (no extrinsic offset): LiDAR x = cam z,
/// LiDAR y = −cam x, LiDAR z = −cam y.
pub fn nominal_cam_to_lidar<T: Real>() -> RigidTransform<T> {
    let (o, z) = (T::one(), T::zero());
    RigidTransform {
        rotation: crate::geometry::Mat3::from_rows([[z, z, o], [-o, z, z], [z, -o, z]]),
        translation: Vec3::zero(),
    }
}
