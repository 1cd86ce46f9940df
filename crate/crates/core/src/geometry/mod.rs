//! Oriented boxes, rigid transforms and rotated IoU.
//!
//! Conventions used throughout the crate:
//! - boxes are parameterized at their geometric center (not the bottom face);
//! - yaw is counterclockwise about +z from the +x axis, normalized to (−π, π];
//! - BEV means the x–y projection.

mod boxes;
mod iou;
mod transform;
mod vec3;

use thiserror::Error;

pub use boxes::{points_in_box, Box3D};
pub use iou::{bev_iou, clip_convex, iou_3d, polygon_area, AREA_EPS};
pub(crate) use iou::{bev_intersection_unchecked, bev_iou_unchecked, iou_3d_unchecked};
pub use transform::{apply_transform, compose, invert, RigidTransform};
pub use vec3::{symmetric_eigen, Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box: dimensions ({l}, {w}, {h}) must be finite and positive")]
    InvalidBox { l: f64, w: f64, h: f64 },
    #[error("invalid rotation: orthogonality error {orthogonality_error:e}, det {det}")]
    InvalidRotation { orthogonality_error: f64, det: f64 },
}
