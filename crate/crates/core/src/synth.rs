//! Procedural roadside LiDAR scenes: a flat ground plane, box-shaped
//! vehicles and a spinning multi-beam sensor simulated by ray casting.
//!
//! Everything is in the world frame with ground at `ground_z`. Each ray
//! (channel × azimuth step) takes its nearest hit against the ground and all
//! boxes; hits beyond the maximum range are dropped. Range noise is Gaussian
//! along the ray, truncated at ±3σ, drawn from a ChaCha8 stream keyed by the
//! ray index, so results do not depend on thread count.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Point3, PointCloud};
use crate::frame::{ClassList, LabeledBox, LabeledFrame};
use crate::geometry::{bev_intersection_unchecked, Box3D, Mat3, RigidTransform, Vec3};
use crate::io::{write_manifest, write_openlabel, write_pcd, FrameLabels, IoError, PcdEncoding};

pub const GROUND_INTENSITY: f64 = 0.1;
pub const VEHICLE_INTENSITY: f64 = 0.5;
/// File name of the manifest written by [`generate_dataset`].
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("could not place {class} #{index} after {attempts} attempts")]
    Placement { class: String, index: usize, attempts: usize },
    #[error("class {0:?} is not in the class list")]
    UnknownClass(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub channels: usize,
    pub azimuth_steps: usize,
    /// Lowest and highest beam elevation, degrees; beams are evenly spaced.
    pub fov_deg: [f64; 2],
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub mount_position: [f64; 3],
    /// Roll, pitch, yaw of the mount, degrees.
    pub mount_rpy_deg: [f64; 3],
}

impl Default for SensorConfig {
    /// 64-beam spinning sensor on a 7 m pole.
    fn default() -> Self {
        Self {
            channels: 64,
            azimuth_steps: 2048,
            fov_deg: [-22.5, 22.5],
            max_range: 120.0,
            range_noise_sigma: 0.1,
            mount_position: [0.0, 0.0, 7.0],
            mount_rpy_deg: [0.0; 3],
        }
    }
}

impl SensorConfig {
    /// Same sensor with every beam aimed below the horizon, so each ray hits
    /// the ground inside the range and a frame has exactly
    /// `channels × azimuth_steps` points.
    pub fn dense() -> Self {
        Self { fov_deg: [-52.5, -7.5], ..Self::default() }
    }

    pub fn num_rays(&self) -> usize {
        self.channels * self.azimuth_steps
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.azimuth_steps == 0 {
            return bad("channels and azimuth_steps must be ≥ 1");
        }
        let [lo, hi] = self.fov_deg;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= -90.0 && hi <= 90.0) {
            return bad("fov_deg must be an ordered pair inside [-90, 90]");
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return bad("max_range must be positive");
        }
        if !(self.range_noise_sigma >= 0.0 && self.range_noise_sigma.is_finite()) {
            return bad("range_noise_sigma must be ≥ 0");
        }
        if self.mount_position.iter().chain(&self.mount_rpy_deg).any(|v| !v.is_finite()) {
            return bad("mount pose must be finite");
        }
        Ok(())
    }

    /// Sensor-to-world transform, `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn mount(&self) -> RigidTransform<f64> {
        let [r, p, y] = self.mount_rpy_deg.map(f64::to_radians);
        let ax = |x, y, z| Vec3::new(x, y, z);
        let rot = Mat3::axis_angle(ax(0.0, 0.0, 1.0), y).mul_mat(&Mat3::axis_angle(ax(0.0, 1.0, 0.0), p)).mul_mat(&Mat3::axis_angle(ax(1.0, 0.0, 0.0), r));
        RigidTransform { rotation: rot, translation: Vec3::from_array(self.mount_position) }
    }

    /// Unit direction of ray `index = channel · azimuth_steps + step` in the
    /// sensor frame.
    pub fn ray_direction(&self, index: usize) -> Vec3<f64> {
        let (ch, step) = (index / self.azimuth_steps, index % self.azimuth_steps);
        let [lo, hi] = self.fov_deg;
        let el = if self.channels > 1 { lo + (hi - lo) * ch as f64 / (self.channels - 1) as f64 } else { lo };
        let az = 2.0 * PI * step as f64 / self.azimuth_steps as f64;
        let (se, ce) = el.to_radians().sin_cos();
        let (sa, ca) = az.sin_cos();
        Vec3::new(ce * ca, ce * sa, se)
    }
}

/// One vehicle class: how many to place and their nominal size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub count: usize,
    /// Mean `[l, w, h]`, meters.
    pub size: [f64; 3],
    /// Each dimension is scaled by a uniform factor in `1 ± size_jitter`.
    pub size_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Boxes are centered at least this far (BEV) from the origin.
    pub min_range: f64,
    pub ground_z: f64,
    /// BEV clearance kept between boxes, meters.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let spec = |name: &str, count, size| ClassSpec { name: name.into(), count, size, size_jitter: 0.1 };
        Self {
            seed: 0,
            classes: vec![spec("Car", 6, [4.5, 1.9, 1.6]), spec("Van", 2, [5.2, 2.0, 2.1]), spec("Truck", 2, [9.0, 2.6, 3.4])],
            x_range: [-45.0, 45.0],
            y_range: [-45.0, 45.0],
            min_range: 18.0,
            ground_z: 0.0,
            margin: 0.5,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !ordered(self.x_range) || !ordered(self.y_range) {
            return bad("placement ranges must be finite and ordered".into());
        }
        if !(self.min_range >= 0.0 && self.margin >= 0.0 && self.ground_z.is_finite()) {
            return bad("min_range and margin must be ≥ 0, ground_z finite".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be ≥ 1".into());
        }
        for c in &self.classes {
            if c.size.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(0.0..1.0).contains(&c.size_jitter) {
                return bad(format!("class {}: sizes must be positive and jitter in [0, 1)", c.name));
            }
        }
        Ok(())
    }
}

/// Seed of frame `index` derived from a dataset base seed.
pub fn frame_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.random()
}

/// Samples non-overlapping boxes resting on the ground. Placement uses
/// stream 0 of the scene seed.
pub fn place_boxes(scene: &SceneConfig, classes: &ClassList) -> Result<Vec<LabeledBox<f64>>, SynthError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut placed: Vec<LabeledBox<f64>> = Vec::new();
    for spec in &scene.classes {
        let class_id = classes.id_of(&spec.name).ok_or_else(|| SynthError::UnknownClass(spec.name.clone()))?;
        for index in 0..spec.count {
            let mut ok = None;
            for _ in 0..scene.max_attempts {
                let cx = rng.random_range(scene.x_range[0]..scene.x_range[1]);
                let cy = rng.random_range(scene.y_range[0]..scene.y_range[1]);
                let dims: [f64; 3] = std::array::from_fn(|k| {
                    let f = if spec.size_jitter > 0.0 { rng.random_range(-spec.size_jitter..spec.size_jitter) } else { 0.0 };
                    spec.size[k] * (1.0 + f)
                });
                let yaw = rng.random_range(-PI..PI);
                if cx.hypot(cy) < scene.min_range {
                    continue;
                }
                let b = Box3D::new(cx, cy, scene.ground_z + dims[2] / 2.0, dims[0], dims[1], dims[2], yaw).expect("positive sizes");
                let grown = Box3D { l: b.l + scene.margin, w: b.w + scene.margin, ..b };
                let clash = placed.iter().any(|p| {
                    let q = Box3D { l: p.bbox.l + scene.margin, w: p.bbox.w + scene.margin, ..p.bbox };
                    bev_intersection_unchecked(&grown, &q) > 0.0
                });
                if !clash {
                    ok = Some(b);
                    break;
                }
            }
            let bbox = ok.ok_or_else(|| SynthError::Placement { class: spec.name.clone(), index, attempts: scene.max_attempts })?;
            placed.push(LabeledBox { bbox, class_id, instance_id: format!("{}_{index}", spec.name.to_lowercase()) });
        }
    }
    Ok(placed)
}

/// Entry distance of a ray into a box (slab test in the box frame), if the
/// ray starts outside and enters at `t > 0`.
pub fn ray_box_hit(origin: Vec3<f64>, dir: Vec3<f64>, b: &Box3D<f64>) -> Option<f64> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let o = [o.x, o.y, o.z];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let (a, e) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(e));
        t1 = t1.min(a.max(e));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Nearest hit of a ray: distance and the index of the box hit (`None` for
/// the ground).
pub fn cast_ray(origin: Vec3<f64>, dir: Vec3<f64>, ground_z: f64, boxes: &[Box3D<f64>]) -> Option<(f64, Option<usize>)> {
    let mut best: Option<(f64, Option<usize>)> = None;
    if dir.z < 0.0 {
        let t = (ground_z - origin.z) / dir.z;
        if t > 0.0 {
            best = Some((t, None));
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box_hit(origin, dir, b) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Some(i)));
            }
        }
    }
    best
}

/// Casts every ray of `sensor` against the ground and `boxes`.
pub fn scan(boxes: &[Box3D<f64>], ground_z: f64, sensor: &SensorConfig, seed: u64) -> Result<PointCloud<f64>, SynthError> {
    sensor.validate()?;
    let mount = sensor.mount();
    let origin = mount.translation;
    let sigma = sensor.range_noise_sigma;
    let noise = Normal::new(0.0, sigma).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let points: Vec<Option<Point3<f64>>> = (0..sensor.num_rays())
        .into_par_iter()
        .map(|r| {
            let dir = mount.apply_dir(sensor.ray_direction(r));
            let (t, hit) = cast_ray(origin, dir, ground_z, boxes)?;
            if t > sensor.max_range {
                return None;
            }
            let t = if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64 + 1);
                (t + noise.sample(&mut rng).clamp(-3.0 * sigma, 3.0 * sigma)).max(0.0)
            } else {
                t
            };
            let p = origin + dir * t;
            let intensity = if hit.is_some() { VEHICLE_INTENSITY } else { GROUND_INTENSITY };
            Some(Point3::new(p.x, p.y, p.z, intensity))
        })
        .collect();
    Ok(PointCloud::from_points(points.into_iter().flatten().collect()))
}

/// One labeled frame: boxes placed from `scene`, points from `sensor`.
pub fn simulate_frame(scene: &SceneConfig, sensor: &SensorConfig, classes: &ClassList) -> Result<LabeledFrame<f64>, SynthError> {
    let boxes = place_boxes(scene, classes)?;
    let raw: Vec<Box3D<f64>> = boxes.iter().map(|b| b.bbox).collect();
    let cloud = scan(&raw, scene.ground_z, sensor, scene.seed)?;
    Ok(LabeledFrame { frame_id: format!("synth_{:016x}", scene.seed), cloud, boxes })
}

/// Writes `n` frames as `frame_NNNNNN.pcd` + `.json` pairs and a manifest
/// listing both. Frame `i` uses `frame_seed(scene.seed, i)`. Returns the
/// manifest path.
pub fn generate_dataset(n: usize, scene: &SceneConfig, sensor: &SensorConfig, classes: &ClassList, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    scene.validate()?;
    sensor.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| IoError::Io { path: out.to_path_buf(), source: e })?;
    let mut entries = Vec::with_capacity(2 * n);
    for i in 0..n {
        let sc = SceneConfig { seed: frame_seed(scene.seed, i as u64), ..scene.clone() };
        let mut frame = simulate_frame(&sc, sensor, classes)?;
        let stem = format!("frame_{i:06}");
        frame.frame_id = stem.clone();
        write_pcd(&frame.cloud, out.join(format!("{stem}.pcd")), PcdEncoding::Binary)?;
        write_openlabel(&FrameLabels::new(stem.clone(), frame.boxes), classes, out.join(format!("{stem}.json")))?;
        entries.push(format!("{stem}.pcd"));
        entries.push(format!("{stem}.json"));
    }
    let manifest = out.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
