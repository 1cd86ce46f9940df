//! OpenLABEL subset: one frame of cuboid annotations.
//!
//! Cuboids are read in either rotation encoding (9 values with Euler angles
//! `x y z rx ry rz l w h`, or 10 values with a quaternion
//! `x y z qx qy qz qw l w h`) and always written as Euler yaw-only.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::frame::{ClassList, LabeledBox};
use crate::geometry::Box3D;
use crate::io::{IoError, IssueKind, ObjectIssue};
use crate::scalar::Real;

/// Labels of a single frame, without the point cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameLabels<T> {
    pub frame_id: String,
    pub boxes: Vec<LabeledBox<T>>,
    /// Optional per-box confidence, present for detection outputs.
    pub scores: Option<Vec<T>>,
}

impl<T: Real> FrameLabels<T> {
    pub fn new(frame_id: impl Into<String>, boxes: Vec<LabeledBox<T>>) -> Self {
        Self { frame_id: frame_id.into(), boxes, scores: None }
    }
}

pub fn to_openlabel_json<T: Real>(labels: &FrameLabels<T>, classes: &ClassList) -> Result<Value, IoError> {
    let mut frame_objects = Map::new();
    let mut objects = Map::new();
    for (i, b) in labels.boxes.iter().enumerate() {
        b.bbox.validate()?;
        let class = classes
            .name(b.class_id)
            .ok_or_else(|| IoError::InvalidValue(format!("class id {} not in class list", b.class_id)))?;
        if frame_objects.contains_key(&b.instance_id) {
            return Err(IoError::InvalidValue(format!("duplicate instance id {:?}", b.instance_id)));
        }
        let bb = &b.bbox;
        let val: Vec<f64> =
            [bb.cx, bb.cy, bb.cz, T::zero(), T::zero(), bb.yaw, bb.l, bb.w, bb.h].iter().map(|v| v.as_f64()).collect();
        let mut data = json!({
            "type": class,
            "cuboid": [{ "name": "shape3D", "val": val }],
        });
        if let Some(scores) = &labels.scores {
            data["num"] = json!([{ "name": "score", "val": scores[i].as_f64() }]);
        }
        frame_objects.insert(b.instance_id.clone(), json!({ "object_data": data }));
        objects.insert(b.instance_id.clone(), json!({ "name": b.instance_id, "type": class }));
    }
    Ok(json!({
        "openlabel": {
            "metadata": { "schema_version": "1.0.0" },
            "objects": objects,
            "frames": {
                "0": {
                    "frame_properties": { "frame_id": labels.frame_id },
                    "objects": frame_objects,
                }
            },
            "frame_intervals": [{ "frame_start": 0, "frame_end": 0 }],
        }
    }))
}

pub fn write_openlabel<T: Real>(labels: &FrameLabels<T>, classes: &ClassList, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let v = to_openlabel_json(labels, classes)?;
    let text = serde_json::to_string_pretty(&v).map_err(|e| IoError::json(path, e))?;
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn read_openlabel<T: Real>(path: impl AsRef<Path>, classes: &ClassList) -> Result<FrameLabels<T>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| IoError::json(path, e))?;
    from_openlabel_json(&v, classes)
}

pub fn from_openlabel_json<T: Real>(v: &Value, classes: &ClassList) -> Result<FrameLabels<T>, IoError> {
    let root = v.get("openlabel").ok_or_else(|| IoError::Schema("missing \"openlabel\" root".into()))?;
    let frames = root.get("frames").and_then(Value::as_object);
    let frame = match frames {
        Some(f) if f.len() == 1 => f.values().next().unwrap(),
        Some(f) if f.is_empty() => &Value::Null,
        Some(f) => return Err(IoError::Schema(format!("expected a single frame, found {}", f.len()))),
        None => &Value::Null,
    };
    let frame_id = frame
        .pointer("/frame_properties/frame_id")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let global = root.get("objects").and_then(Value::as_object);
    let empty = Map::new();
    let objs = frame.get("objects").and_then(Value::as_object).unwrap_or(&empty);

    let mut boxes = Vec::with_capacity(objs.len());
    let mut scores = Vec::new();
    let mut issues = Vec::new();
    for (uid, obj) in objs {
        let data = obj.get("object_data").unwrap_or(&Value::Null);
        let type_name = data
            .get("type")
            .and_then(Value::as_str)
            .or_else(|| global.and_then(|g| g.get(uid)).and_then(|o| o.get("type")).and_then(Value::as_str));
        let issue = |kind| ObjectIssue { instance_id: uid.clone(), kind };
        let class_id = match type_name {
            None => {
                issues.push(issue(IssueKind::UnknownClass(String::new())));
                continue;
            }
            Some(t) => match classes.id_of(t) {
                Some(c) => c,
                None => {
                    issues.push(issue(IssueKind::UnknownClass(t.to_string())));
                    continue;
                }
            },
        };
        let cuboid = match data.get("cuboid") {
            Some(Value::Array(a)) => a.first(),
            Some(c @ Value::Object(_)) => Some(c),
            _ => None,
        };
        let Some(val) = cuboid.and_then(|c| c.get("val")).and_then(Value::as_array) else {
            issues.push(issue(IssueKind::MissingCuboid));
            continue;
        };
        let nums: Option<Vec<f64>> = val.iter().map(Value::as_f64).collect();
        let Some(nums) = nums else {
            issues.push(issue(IssueKind::BadValue("non-numeric cuboid entry".into())));
            continue;
        };
        let (c, yaw, dims) = match nums.len() {
            9 => ([nums[0], nums[1], nums[2]], nums[5], [nums[6], nums[7], nums[8]]),
            10 => {
                let (qx, qy, qz, qw) = (nums[3], nums[4], nums[5], nums[6]);
                let yaw = (2.0 * (qw * qz + qx * qy)).atan2(1.0 - 2.0 * (qy * qy + qz * qz));
                ([nums[0], nums[1], nums[2]], yaw, [nums[7], nums[8], nums[9]])
            }
            n => {
                issues.push(issue(IssueKind::BadValue(format!("cuboid has {n} values, expected 9 or 10"))));
                continue;
            }
        };
        let l = |x: f64| T::lit(x);
        match Box3D::new(l(c[0]), l(c[1]), l(c[2]), l(dims[0]), l(dims[1]), l(dims[2]), l(yaw)) {
            Ok(bbox) => {
                if let Some(s) = data.get("num").and_then(Value::as_array).and_then(|a| {
                    a.iter().find(|n| n.get("name").and_then(Value::as_str) == Some("score"))
                }) {
                    scores.push(T::lit(s.get("val").and_then(Value::as_f64).unwrap_or(0.0)));
                }
                boxes.push(LabeledBox { bbox, class_id, instance_id: uid.clone() });
            }
            Err(e) => issues.push(issue(IssueKind::InvalidBox(e.to_string()))),
        }
    }
    if !issues.is_empty() {
        for i in &issues {
            log::warn!("frame {frame_id:?}: object {:?}: {}", i.instance_id, i.kind);
        }
        return Err(IoError::Labels { frame_id, issues });
    }
    let scores = (!boxes.is_empty() && scores.len() == boxes.len()).then_some(scores);
    Ok(FrameLabels { frame_id, boxes, scores })
}
