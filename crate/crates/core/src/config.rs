//! Pipeline configuration file (TOML). Every section is optional; missing
//! keys inside a section take that section type's default. Unknown keys are
//! rejected. `PipelineConfig::default()` uses the roadside grid, while a
//! partially written `[grid]` starts from the forward-facing grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentParams;
use crate::eval::EvalConfig;
use crate::frame::ClassList;
use crate::io::PcdEncoding;
use crate::losses::{ConsistencyParams, LossWeights};
use crate::neural::{ArchitectureConfig, DecodeConfig};
use crate::postprocess::NmsParams;
use crate::preprocess::PillarGridConfig;
use crate::registration::IcpParams;
use crate::synth::{SceneConfig, SensorConfig};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "PILLAR3D_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundParams {
    pub ransac_iterations: usize,
    /// Inlier band of the plane fit, meters.
    pub inlier_eps: f64,
    /// Points within this distance of the plane are removed.
    pub removal_eps: f64,
    /// The plane is fit on at most this many evenly strided points.
    pub fit_sample: usize,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self { ransac_iterations: 100, inlier_eps: 0.2, removal_eps: 0.2, fit_sample: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    pub max_iterations: usize,
    pub max_correspondence_dist: f64,
    pub convergence_eps: f64,
    /// Voxel edge for downsampling both clouds first; 0 disables.
    pub voxel_size: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        let d = IcpParams::<f64>::default();
        Self { max_iterations: d.max_iterations, max_correspondence_dist: d.max_correspondence_dist, convergence_eps: d.convergence_eps, voxel_size: 0.0 }
    }
}

impl RegistrationParams {
    pub fn icp(&self) -> IcpParams<f64> {
        IcpParams {
            max_iterations: self.max_iterations,
            max_correspondence_dist: self.max_correspondence_dist,
            convergence_eps: self.convergence_eps,
            ..IcpParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcdFormat {
    Ascii,
    #[default]
    Binary,
}

impl From<PcdFormat> for PcdEncoding {
    fn from(f: PcdFormat) -> Self {
        match f {
            PcdFormat::Ascii => PcdEncoding::Ascii,
            PcdFormat::Binary => PcdEncoding::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoParams {
    pub pcd_format: PcdFormat,
    /// Rows of the 3 × 4 camera-to-LiDAR matrix used for KITTI labels; the
    /// nominal KITTI extrinsics when absent.
    pub kitti_cam_to_lidar: Option<[[f64; 4]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub weights: LossWeights,
    pub consistency: ConsistencyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub classes: ClassList,
    pub grid: PillarGridConfig,
    pub ground: GroundParams,
    pub registration: RegistrationParams,
    pub architecture: ArchitectureConfig,
    pub decode: DecodeConfig,
    pub nms: NmsParams,
    pub augmentation: AugmentParams,
    pub losses: LossParams,
    pub eval: EvalConfig,
    pub sensor: SensorConfig,
    pub scene: SceneConfig,
    pub io: IoParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            classes: ClassList::default(),
            grid: PillarGridConfig::roadside(),
            ground: GroundParams::default(),
            registration: RegistrationParams::default(),
            architecture: ArchitectureConfig::default(),
            decode: DecodeConfig::default(),
            nms: NmsParams::default(),
            augmentation: AugmentParams::default(),
            losses: LossParams::default(),
            eval: EvalConfig::default(),
            sensor: SensorConfig::default(),
            scene: SceneConfig::default(),
            io: IoParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text)
    }

    /// Explicit path, else the `PILLAR3D_CONFIG` variable, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        if self.classes.is_empty() {
            return Err(inv("class list is empty".into()));
        }
        self.grid.validate().map_err(|e| inv(format!("grid: {e}")))?;
        let (h, w) = (self.grid.height(), self.grid.width());
        if h % 8 != 0 || w % 8 != 0 {
            return Err(inv(format!("grid: {h}×{w} pillars must be divisible by 8")));
        }
        self.architecture.validate().map_err(|e| inv(format!("architecture: {e}")))?;
        if self.architecture.num_classes != self.classes.len() {
            return Err(inv(format!("architecture has {} classes, class list has {}", self.architecture.num_classes, self.classes.len())));
        }
        if !(0.0..=1.0).contains(&self.decode.score_threshold) || self.decode.max_candidates == 0 {
            return Err(inv("decode: score_threshold in [0, 1] and max_candidates ≥ 1".into()));
        }
        let g = &self.ground;
        if g.ransac_iterations == 0 || g.fit_sample < 3 || !(g.inlier_eps > 0.0) || !(g.removal_eps >= 0.0) {
            return Err(inv("ground: iterations ≥ 1, fit_sample ≥ 3, inlier_eps > 0, removal_eps ≥ 0".into()));
        }
        self.registration.icp().validate().map_err(|e| inv(format!("registration: {e}")))?;
        if !(self.registration.voxel_size >= 0.0) {
            return Err(inv("registration: voxel_size must be ≥ 0".into()));
        }
        self.nms.validate().map_err(|e| inv(format!("nms: {e}")))?;
        self.augmentation.validate().map_err(|e| inv(format!("augmentation: {e}")))?;
        self.losses.weights.validate().map_err(|e| inv(format!("losses: {e}")))?;
        let c = &self.losses.consistency;
        if !(0.0..=1.0).contains(&c.tau_c) || !(c.delta > 0.0) {
            return Err(inv("losses.consistency: tau_c in [0, 1], delta > 0".into()));
        }
        self.eval.validate().map_err(|e| inv(format!("eval: {e}")))?;
        for [a, b] in &self.eval.class_merge {
            if *a >= self.classes.len() || *b >= self.classes.len() {
                return Err(inv(format!("eval.class_merge: [{a}, {b}] outside the class list")));
            }
        }
        self.sensor.validate().map_err(|e| inv(format!("sensor: {e}")))?;
        self.scene.validate().map_err(|e| inv(format!("scene: {e}")))?;
        if let Some(s) = self.scene.classes.iter().find(|s| self.classes.id_of(&s.name).is_none()) {
            return Err(inv(format!("scene: class {:?} is not in the class list", s.name)));
        }
        if let Some(m) = &self.io.kitti_cam_to_lidar {
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(inv("io.kitti_cam_to_lidar must be finite".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = PipelineConfig::from_toml("[nms]\niou_threshold = 0.5\n[grid]\npillar_size_x = 0.32\npillar_size_y = 0.32\n").unwrap();
        assert_eq!(cfg.nms.iou_threshold, 0.5);
        assert_eq!(cfg.nms.beta, NmsParams::default().beta);
        // A partial section fills from the grid type's own default.
        assert_eq!((cfg.grid.width(), cfg.grid.height()), (216, 248));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(PipelineConfig::from_toml("[nms]\niou_treshold = 0.5\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::from_toml("[nms]\niou_threshold = 1.5\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::from_toml("classes = [\"Car\"]\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::from_toml("[grid]\npillar_size_x = 0.3\n"), Err(ConfigError::Invalid(_))));
    }
}
