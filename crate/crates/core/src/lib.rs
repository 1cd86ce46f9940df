//! Roadside LiDAR 3D object detection pipeline.
//!
//! The crate covers point-cloud registration, ground removal and
//! pillarization, a forward-only reference network (stacked triple attention,
//! pillar feature net, attentive hierarchical backbone, multi-task head),
//! confidence rectification with distance-variant IoU-weighted NMS,
//! shape-aware augmentation, training losses, KITTI-style AP evaluation and a
//! procedural synthetic LiDAR generator.
//!
//! Geometry-facing code is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases. Network tensors are
//! always `f32`.

pub mod augment;
pub mod cloud;
pub mod config;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod neural;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod registration;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use cloud::{Point3, PointCloud};
pub use frame::{ClassList, LabeledBox, LabeledFrame};
pub use geometry::{Box3D, RigidTransform, Vec3};
pub use postprocess::Detection;
pub use scalar::Real;
pub use tensor::DenseTensor;

/// Double-precision point.
pub type Point = Point3<f64>;
/// Double-precision cloud; the default scalar of the pipeline.
pub type Cloud = PointCloud<f64>;
pub type Cloud32 = PointCloud<f32>;
pub type Box3 = Box3D<f64>;
pub type Box3f = Box3D<f32>;
pub type Transform = RigidTransform<f64>;
pub type Transform32 = RigidTransform<f32>;
pub type Frame = LabeledFrame<f64>;
pub type Det = Detection<f64>;
