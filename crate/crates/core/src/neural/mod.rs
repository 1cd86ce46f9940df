//! Forward-only reference network: stacked triple attention, pillar feature
//! net, attentive hierarchical backbone and a four-branch head.
//!
//! All tensors are `f32`. Parameters live in a [`ModelWeights`] map keyed by
//! dotted names; [`param_specs`] lists every name and shape for a config.

mod attention;
mod backbone;
mod encoder;
mod head;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::ModelWeights;
use crate::preprocess::{scatter, PillarGridConfig, PillarSet, DECORATED_FEATURES};
use crate::tensor::DenseTensor;

pub use attention::{triple_attention_forward, TaOutput, TaWeights};
pub use backbone::{attentive_addition, attentive_addition_weights, backbone_forward};
pub use encoder::pillar_encoder_forward;
pub use head::{anchor_boxes, decode_box, decode_detections, encode_box, head_forward, DecodeConfig, RawPredictions};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("grid {height}×{width} is not divisible by 8")]
    Indivisible { height: usize, width: usize },
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
}

/// Prior box of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// `[l, w, h]` in meters.
    pub size: [f64; 3],
    pub z_center: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Output channels of the two triple-attention stages.
    pub ta_dims: [usize; 2],
    /// Hidden width of the per-point MLP in the point-wise branch.
    pub ta_point_hidden: usize,
    /// Bottleneck ratio of the channel-wise and voxel-wise branches.
    pub ta_reduction: usize,
    pub pfn_out: usize,
    pub backbone_channels: [usize; 3],
    pub fused_channels: usize,
    pub num_classes: usize,
    /// Yaw rotations per class; anchor yaws are `r·π/anchors_per_cell`.
    pub anchors_per_cell: usize,
    pub anchors: Vec<AnchorSpec>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            ta_dims: [64, 128],
            ta_point_hidden: 16,
            ta_reduction: 2,
            pfn_out: 64,
            backbone_channels: [64, 128, 256],
            fused_channels: 128,
            num_classes: 3,
            anchors_per_cell: 2,
            anchors: vec![
                AnchorSpec { size: [4.5, 1.9, 1.6], z_center: 0.8 },
                AnchorSpec { size: [5.2, 2.0, 2.1], z_center: 1.05 },
                AnchorSpec { size: [9.0, 2.6, 3.4], z_center: 1.7 },
            ],
        }
    }
}

impl ArchitectureConfig {
    /// Narrow variant for tests and quick runs.
    pub fn small() -> Self {
        Self { ta_dims: [16, 32], ta_point_hidden: 8, pfn_out: 32, backbone_channels: [16, 32, 64], fused_channels: 32, ..Self::default() }
    }

    pub fn num_anchors(&self) -> usize {
        self.num_classes * self.anchors_per_cell
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let counts = [
            self.ta_dims[0],
            self.ta_dims[1],
            self.ta_point_hidden,
            self.ta_reduction,
            self.pfn_out,
            self.backbone_channels[0],
            self.backbone_channels[1],
            self.backbone_channels[2],
            self.fused_channels,
            self.num_classes,
            self.anchors_per_cell,
        ];
        if counts.contains(&0) {
            return Err(NeuralError::InvalidConfig("all widths and counts must be ≥ 1".into()));
        }
        if self.pfn_out % 2 != 0 {
            return Err(NeuralError::InvalidConfig(format!("pfn_out {} must be even", self.pfn_out)));
        }
        if self.anchors.len() != self.num_classes {
            return Err(NeuralError::InvalidConfig(format!("{} anchor specs for {} classes", self.anchors.len(), self.num_classes)));
        }
        if self.anchors.iter().any(|a| a.size.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !a.z_center.is_finite()) {
            return Err(NeuralError::InvalidConfig("anchor sizes must be positive and finite".into()));
        }
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

fn linear_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, o: usize, i: usize) {
    out.push((format!("{name}.weight"), vec![o, i], Init::Uniform { fan_in: i }));
    out.push((format!("{name}.bias"), vec![o], Init::Zeros));
}

fn bn_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
    out.push((format!("{name}.scale"), vec![c], Init::Ones));
    out.push((format!("{name}.shift"), vec![c], Init::Zeros));
}

fn conv_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, o: usize, i: usize, k: usize) {
    out.push((format!("{name}.weight"), vec![o, i, k, k], Init::Uniform { fan_in: i * k * k }));
    out.push((format!("{name}.bias"), vec![o], Init::Zeros));
}

fn deconv_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize, k: usize) {
    out.push((format!("{name}.weight"), vec![i, o, k, k], Init::Uniform { fan_in: i * k * k }));
    out.push((format!("{name}.bias"), vec![o], Init::Zeros));
}

pub(crate) fn ta_spec(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize, hidden: usize, reduction: usize) {
    let cr = (c / reduction).max(1);
    let vr = ((c + 3) / reduction).max(1);
    linear_spec(out, &format!("{prefix}.point_fc1"), hidden, 1);
    linear_spec(out, &format!("{prefix}.point_fc2"), 1, hidden);
    linear_spec(out, &format!("{prefix}.channel_fc1"), cr, c);
    linear_spec(out, &format!("{prefix}.channel_fc2"), c, cr);
    linear_spec(out, &format!("{prefix}.voxel_fc1"), vr, c + 3);
    linear_spec(out, &format!("{prefix}.voxel_fc2"), 1, vr);
}

/// Every parameter of the network with its shape and initializer.
pub fn param_specs(cfg: &ArchitectureConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut s = Vec::new();
    let c0 = DECORATED_FEATURES;
    let [t1, t2] = cfg.ta_dims;
    ta_spec(&mut s, "encoder.ta1", c0, cfg.ta_point_hidden, cfg.ta_reduction);
    linear_spec(&mut s, "encoder.fc1", t1, 2 * c0);
    bn_spec(&mut s, "encoder.bn1", t1);
    ta_spec(&mut s, "encoder.ta2", t1, cfg.ta_point_hidden, cfg.ta_reduction);
    linear_spec(&mut s, "encoder.fc2", t2, 2 * t1);
    bn_spec(&mut s, "encoder.bn2", t2);
    let half = cfg.pfn_out / 2;
    linear_spec(&mut s, "encoder.pfn1", half, t2);
    bn_spec(&mut s, "encoder.pfn1_bn", half);
    linear_spec(&mut s, "encoder.pfn2", cfg.pfn_out, 2 * half);
    bn_spec(&mut s, "encoder.pfn2_bn", cfg.pfn_out);

    let ch = cfg.backbone_channels;
    let mut cin = cfg.pfn_out;
    for (g, &c) in ch.iter().enumerate() {
        for j in 0..3 {
            let name = format!("backbone.group{g}.conv{j}");
            conv_spec(&mut s, &name, c, if j == 0 { cin } else { c }, 3);
            bn_spec(&mut s, &format!("{name}_bn"), c);
        }
        cin = c;
    }
    for (name, i, o) in [("backbone.up2", ch[2], ch[1]), ("backbone.up1", ch[1], ch[0])] {
        deconv_spec(&mut s, name, i, o, 2);
        bn_spec(&mut s, &format!("{name}_bn"), o);
    }
    for (g, (&c, k)) in ch.iter().zip([1, 2, 4]).enumerate() {
        let name = format!("backbone.final{g}");
        deconv_spec(&mut s, &name, c, cfg.fused_channels, k);
        bn_spec(&mut s, &format!("{name}_bn"), cfg.fused_channels);
    }
    for g in 0..3 {
        conv_spec(&mut s, &format!("backbone.attn{g}"), cfg.fused_channels, cfg.fused_channels, 1);
    }
    let a = cfg.num_anchors();
    for (name, n) in [("head.cls", a * cfg.num_classes), ("head.box", a * 7), ("head.dir", a * 2), ("head.iou", a)] {
        conv_spec(&mut s, name, n, cfg.fused_channels, 1);
    }
    s
}

pub fn param_shapes(cfg: &ArchitectureConfig) -> std::collections::BTreeMap<String, Vec<usize>> {
    param_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Seeded initialization: weights uniform in `±1/√fan_in`, biases and
/// batch-norm shifts zero, batch-norm scales one. Parameters are drawn in
/// name order from one ChaCha8 stream.
pub fn init_weights(cfg: &ArchitectureConfig, seed: u64) -> Result<ModelWeights, NeuralError> {
    cfg.validate()?;
    let mut specs = param_specs(cfg);
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = std::collections::BTreeMap::new();
    for (name, shape, init) in specs {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { fan_in } => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b) as f32).collect()
            }
        };
        params.insert(name, DenseTensor::from_vec(&shape, data).expect("sized above"));
    }
    Ok(ModelWeights { params, seed })
}

/// Checks that `w` has exactly the parameters of `cfg`.
pub fn check_weights(cfg: &ArchitectureConfig, w: &ModelWeights) -> Result<(), NeuralError> {
    let want = param_shapes(cfg);
    for (name, shape) in &want {
        let t = w.get(name).ok_or_else(|| NeuralError::MissingParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(NeuralError::ParamShape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
        }
    }
    if let Some(extra) = w.params.keys().find(|k| !want.contains_key(*k)) {
        return Err(NeuralError::Shape(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

pub(crate) fn param<'a>(w: &'a ModelWeights, name: &str) -> Result<&'a DenseTensor, NeuralError> {
    w.get(name).ok_or_else(|| NeuralError::MissingParam(name.to_string()))
}

/// Validated network: config plus matching weights.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ArchitectureConfig,
    pub weights: ModelWeights,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pillar_features: DenseTensor,
    pub pseudo_image: DenseTensor,
    pub backbone: DenseTensor,
    pub raw: RawPredictions,
}

impl Network {
    pub fn new(cfg: ArchitectureConfig, weights: ModelWeights) -> Result<Self, NeuralError> {
        cfg.validate()?;
        check_weights(&cfg, &weights)?;
        Ok(Self { cfg, weights })
    }

    pub fn seeded(cfg: ArchitectureConfig, seed: u64) -> Result<Self, NeuralError> {
        let weights = init_weights(&cfg, seed)?;
        Self::new(cfg, weights)
    }

    pub fn encode(&self, pillars: &PillarSet) -> Result<DenseTensor, NeuralError> {
        pillar_encoder_forward(pillars, &self.weights)
    }

    pub fn pseudo_image(&self, features: &DenseTensor, pillars: &PillarSet, grid: &PillarGridConfig) -> Result<DenseTensor, NeuralError> {
        Ok(scatter(features, &pillars.coords, grid.height(), grid.width())?)
    }

    pub fn backbone(&self, image: &DenseTensor) -> Result<DenseTensor, NeuralError> {
        backbone_forward(image, &self.weights)
    }

    pub fn head(&self, features: &DenseTensor) -> Result<RawPredictions, NeuralError> {
        head_forward(features, &self.weights, &self.cfg)
    }

    pub fn forward(&self, pillars: &PillarSet, grid: &PillarGridConfig) -> Result<ForwardOutput, NeuralError> {
        let (h, w) = (grid.height(), grid.width());
        if h % 8 != 0 || w % 8 != 0 {
            return Err(NeuralError::Indivisible { height: h, width: w });
        }
        let pillar_features = self.encode(pillars)?;
        let pseudo_image = self.pseudo_image(&pillar_features, pillars, grid)?;
        let backbone = self.backbone(&pseudo_image)?;
        let raw = self.head(&backbone)?;
        Ok(ForwardOutput { pillar_features, pseudo_image, backbone, raw })
    }
}
