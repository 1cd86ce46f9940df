//! Labeled frames and the configured class list.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::geometry::Box3D;
use crate::scalar::Real;

/// Ordered class names; a class id is an index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassList(pub Vec<String>);

impl Default for ClassList {
    fn default() -> Self {
        Self(vec!["Car".into(), "Van".into(), "Truck".into()])
    }
}

impl ClassList {
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ground-truth box with its class and a frame-unique instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox<T> {
    pub bbox: Box3D<T>,
    pub class_id: usize,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledFrame<T> {
    pub frame_id: String,
    pub cloud: PointCloud<T>,
    pub boxes: Vec<LabeledBox<T>>,
}

impl<T: Real> LabeledFrame<T> {
    /// Checks unique instance ids and class ids within `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for b in &self.boxes {
            if !seen.insert(b.instance_id.as_str()) {
                return Err(format!("duplicate instance id {:?}", b.instance_id));
            }
            if b.class_id >= num_classes {
                return Err(format!("class id {} out of range", b.class_id));
            }
            b.bbox.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
