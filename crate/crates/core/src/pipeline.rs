//! End-to-end inference on one frame with per-stage timing, plus the flat
//! detection CSV used between `infer` and `eval`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::config::{GroundParams, PipelineConfig};
use crate::frame::ClassList;
use crate::geometry::Box3D;
use crate::io::IoError;
use crate::neural::{decode_detections, ops::masked_max, Network, NeuralError};
use crate::postprocess::{postprocess, Detection, PostprocessError};
use crate::preprocess::{pillarize, ransac_ground_plane, remove_ground, scatter, PillarSet, PlaneModel, PreprocessError};
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("detection CSV line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// Stage names in execution order, as printed by `bench`.
pub const STAGES: [&str; 6] = ["ground", "pillarize", "encoder", "backbone", "head", "nms"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    /// Duration of each entry of [`STAGES`].
    pub stages: [Duration; 6],
    /// Wall time of the whole call.
    pub total: Duration,
}

impl StageTimings {
    pub fn stage_sum(&self) -> Duration {
        self.stages.iter().sum()
    }

    /// `stage,ms` rows followed by `sum` and `total`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,ms\n");
        for (name, d) in STAGES.iter().zip(&self.stages) {
            let _ = writeln!(s, "{name},{:.3}", d.as_secs_f64() * 1e3);
        }
        let _ = writeln!(s, "sum,{:.3}", self.stage_sum().as_secs_f64() * 1e3);
        let _ = writeln!(s, "total,{:.3}", self.total.as_secs_f64() * 1e3);
        s
    }
}

/// Fits the ground plane on an evenly strided subsample and removes the
/// plane's points from the full cloud.
pub fn ground_removal(cloud: &PointCloud<f64>, p: &GroundParams, seed: u64) -> Result<(PointCloud<f64>, PlaneModel<f64>), PreprocessError> {
    let n = cloud.len();
    let stride = n.div_ceil(p.fit_sample.max(1)).max(1);
    let sample = PointCloud::from_points(cloud.points.iter().step_by(stride).copied().collect());
    let (plane, _) = ransac_ground_plane(&sample, p.ransac_iterations, p.inlier_eps, seed)?;
    Ok((remove_ground(cloud, &plane, p.removal_eps), plane))
}

/// Per-pillar max of the decorated point features (P × 9).
pub fn pillar_max_features(set: &PillarSet) -> DenseTensor {
    let (n, c) = (set.features.dim(1), set.features.dim(2));
    let mut out = Vec::with_capacity(set.len() * c);
    for (p, &k) in set.point_counts.iter().enumerate() {
        out.extend(masked_max(&set.features.data()[p * n * c..(p + 1) * n * c], k, c));
    }
    DenseTensor::from_vec(&[set.len(), c], out).expect("sized above")
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub cloud: PointCloud<f64>,
    pub pillars: PillarSet,
    /// 9 × H × W image of per-pillar feature maxima.
    pub pseudo_image: DenseTensor,
    pub timings: [Duration; 3],
}

/// Ground removal, pillarization and scatter without the network.
pub fn preprocess_chain(cloud: &PointCloud<f64>, cfg: &PipelineConfig, seed: u64) -> Result<PreprocessOutput, PreprocessError> {
    let t0 = Instant::now();
    let (above, _) = ground_removal(cloud, &cfg.ground, seed)?;
    let t1 = Instant::now();
    let pillars = pillarize(&above, &cfg.grid)?;
    let t2 = Instant::now();
    let pseudo_image = scatter(&pillar_max_features(&pillars), &pillars.coords, cfg.grid.height(), cfg.grid.width())?;
    let t3 = Instant::now();
    Ok(PreprocessOutput { cloud: above, pillars, pseudo_image, timings: [t1 - t0, t2 - t1, t3 - t2] })
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub detections: Vec<Detection<f64>>,
    pub timings: StageTimings,
    pub points_above_ground: usize,
    pub pillars: usize,
}

/// Full forward pass: ground removal → pillars → encoder → backbone → head →
/// decode → rectification and NMS.
pub fn infer_frame(cloud: &PointCloud<f64>, cfg: &PipelineConfig, net: &Network, seed: u64) -> Result<InferOutput, PipelineError> {
    let start = Instant::now();
    let mut t = StageTimings::default();
    let mut mark = start;
    let mut lap = |i: usize, t: &mut StageTimings| {
        let now = Instant::now();
        t.stages[i] = now - mark;
        mark = now;
    };
    let (above, _) = ground_removal(cloud, &cfg.ground, seed)?;
    lap(0, &mut t);
    let pillars = pillarize(&above, &cfg.grid)?;
    lap(1, &mut t);
    let features = net.encode(&pillars)?;
    let image = net.pseudo_image(&features, &pillars, &cfg.grid)?;
    lap(2, &mut t);
    let fused = net.backbone(&image)?;
    lap(3, &mut t);
    let raw = net.head(&fused)?;
    let candidates = decode_detections(&raw, &net.cfg, &cfg.grid, &cfg.decode)?;
    lap(4, &mut t);
    let detections = postprocess(&candidates, &cfg.nms)?;
    lap(5, &mut t);
    t.total = start.elapsed();
    Ok(InferOutput { detections, timings: t, points_above_ground: above.len(), pillars: pillars.len() })
}

pub const CSV_HEADER: &str = "frame,class,score,cx,cy,cz,l,w,h,yaw";

/// One row per detection; the score column holds the rectified score.
pub fn detections_to_csv(frame: &str, dets: &[Detection<f64>], classes: &ClassList) -> Result<String, PipelineError> {
    let mut s = format!("{CSV_HEADER}\n");
    for d in dets {
        let class = classes.name(d.class_id).ok_or_else(|| IoError::InvalidValue(format!("class id {} not in class list", d.class_id)))?;
        let b = &d.bbox;
        let _ = writeln!(s, "{frame},{class},{},{},{},{},{},{},{},{}", d.rectified_score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw);
    }
    Ok(s)
}

/// Parses [`detections_to_csv`] output. Rows keep their frame column.
pub fn detections_from_csv(text: &str, classes: &ClassList) -> Result<Vec<(String, Detection<f64>)>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == CSV_HEADER) {
            continue;
        }
        let bad = |msg: String| PipelineError::Csv { line: i + 1, msg };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(bad(format!("expected 10 columns, found {}", cols.len())));
        }
        let class = classes.id_of(cols[1]).ok_or_else(|| bad(format!("unknown class {:?}", cols[1])))?;
        let v: Vec<f64> = cols[2..].iter().map(|c| c.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(e.to_string()))?;
        let bbox = Box3D::new(v[1], v[2], v[3], v[4], v[5], v[6], v[7]).map_err(|e| bad(e.to_string()))?;
        let det = Detection::new(bbox, class, v[0], 1.0).map_err(|e| bad(e.to_string()))?;
        out.push((cols[0].to_string(), det));
    }
    Ok(out)
}

pub fn read_detections_csv(path: impl AsRef<Path>, classes: &ClassList) -> Result<Vec<(String, Detection<f64>)>, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e })?;
    detections_from_csv(&text, classes)
}
