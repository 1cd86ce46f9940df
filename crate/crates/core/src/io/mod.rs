//! File formats: PCD clouds, OpenLABEL labels, model weights, KITTI labels and
//! dataset manifests.

mod kitti;
mod openlabel;
mod pcd;
mod weights;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::GeometryError;

pub use kitti::{nominal_cam_to_lidar, parse_kitti_labels, read_kitti_labels};
pub use openlabel::{from_openlabel_json, read_openlabel, to_openlabel_json, write_openlabel, FrameLabels};
pub use pcd::{decode_pcd, encode_pcd, read_pcd, write_pcd, PcdEncoding};
pub use weights::{blob_path, load_weights, save_weights, ModelWeights};

#[derive(Debug, Clone, PartialEq)]
pub enum IssueKind {
    MissingCuboid,
    UnknownClass(String),
    InvalidBox(String),
    BadValue(String),
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IssueKind::MissingCuboid => write!(f, "missing cuboid"),
            IssueKind::UnknownClass(c) => write!(f, "unknown class {c:?}"),
            IssueKind::InvalidBox(m) => write!(f, "invalid box: {m}"),
            IssueKind::BadValue(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectIssue {
    pub instance_id: String,
    pub kind: IssueKind,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: JSON parse error: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed PCD header: {0}")]
    MalformedHeader(String),
    #[error("unsupported field layout: {0}")]
    UnsupportedLayout(String),
    #[error("truncated data: expected {expected} records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("frame {frame_id:?}: {} object(s) rejected", issues.len())]
    Labels { frame_id: String, issues: Vec<ObjectIssue> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checksum mismatch: manifest {expected}, blob {actual}")]
    Checksum { expected: String, actual: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        IoError::Json { path: path.to_path_buf(), source }
    }
}

/// Writes a dataset manifest: one relative path per line.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[String]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(e);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Reads a manifest and resolves entries relative to its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                Err(IoError::Schema(format!("manifest entry {l:?} must be relative")))
            } else {
                Ok(base.join(p))
            }
        })
        .collect()
}

/// Groups manifest entries into (cloud, labels) pairs by file stem, in manifest order.
pub fn pair_frames(entries: &[PathBuf]) -> Result<Vec<(PathBuf, Option<PathBuf>)>, IoError> {
    let mut pairs: Vec<(PathBuf, Option<PathBuf>)> = Vec::new();
    let mut labels: std::collections::HashMap<String, PathBuf> = Default::default();
    for e in entries {
        let stem = e.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match e.extension().and_then(|x| x.to_str()) {
            Some("pcd") => pairs.push((e.clone(), None)),
            Some("json") => {
                labels.insert(stem, e.clone());
            }
            _ => return Err(IoError::Schema(format!("manifest entry {} is neither .pcd nor .json", e.display()))),
        }
    }
    for (cloud, lab) in &mut pairs {
        let stem = cloud.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        *lab = labels.remove(&stem);
    }
    Ok(pairs)
}
