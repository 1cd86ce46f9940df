//! Model weights: JSON manifest plus a flat little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::IoError;
use crate::tensor::DenseTensor;

/// Named parameter tensors, keyed by parameter path (e.g. `encoder.ta1.point_fc1.weight`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub params: BTreeMap<String, DenseTensor>,
    pub seed: u64,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.params.get(name)
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(DenseTensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(DenseTensor::all_finite)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    dtype: String,
    blob: String,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

const FORMAT: &str = "pillar3d-weights-v1";

/// Path of the blob that accompanies a manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let blob_file = blob_path(path);
    let mut blob = Vec::with_capacity(w.num_parameters() * 4);
    let mut tensors = Vec::with_capacity(w.params.len());
    let mut offset = 0;
    for (name, t) in &w.params {
        if !t.all_finite() {
            return Err(IoError::InvalidValue(format!("parameter {name} has non-finite entries")));
        }
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        seed: w.seed,
        dtype: "f32".into(),
        blob: blob_file.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| IoError::json(path, e))?;
    fs::write(&blob_file, &blob).map_err(|e| IoError::io(&blob_file, e))?;
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Loads weights; when `expected` is given every tensor must be present with exactly that shape.
pub fn load_weights(
    path: impl AsRef<Path>,
    expected: Option<&BTreeMap<String, Vec<usize>>>,
) -> Result<ModelWeights, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| IoError::json(path, e))?;
    if manifest.format != FORMAT || manifest.dtype != "f32" {
        return Err(IoError::Schema(format!("unsupported weights format {} / dtype {}", manifest.format, manifest.dtype)));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| IoError::io(&blob_file, e))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.sha256 {
        return Err(IoError::Checksum { expected: manifest.sha256, actual: digest });
    }
    if blob.len() % 4 != 0 {
        return Err(IoError::Truncated { expected: blob.len().div_ceil(4), found: blob.len() / 4 });
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut params = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n).filter(|&end| end <= floats.len()).ok_or_else(|| {
            IoError::ShapeMismatch { name: e.name.clone(), expected: vec![floats.len().saturating_sub(e.offset)], got: e.shape.clone() }
        })?;
        let t = DenseTensor::from_vec(&e.shape, floats[e.offset..end].to_vec()).expect("length checked");
        if !t.all_finite() {
            return Err(IoError::InvalidValue(format!("parameter {} has non-finite entries", e.name)));
        }
        if params.insert(e.name.clone(), t).is_some() {
            return Err(IoError::Schema(format!("duplicate parameter {}", e.name)));
        }
    }
    if let Some(expected) = expected {
        for (name, shape) in expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(IoError::ShapeMismatch { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() })
                }
                None => return Err(IoError::ShapeMismatch { name: name.clone(), expected: shape.clone(), got: vec![] }),
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(IoError::ShapeMismatch { name: extra.clone(), expected: vec![], got: params[extra].shape().to_vec() });
        }
    }
    Ok(ModelWeights { params, seed: manifest.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights {
        let mut params = BTreeMap::new();
        params.insert("a.weight".into(), DenseTensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7.0]).unwrap());
        params.insert("a.bias".into(), DenseTensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
        ModelWeights { params, seed: 42 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        let w = sample();
        save_weights(&w, &p).unwrap();
        let back = load_weights(&p, Some(&w.shapes())).unwrap();
        assert!(back.bit_eq(&w));
    }

    #[test]
    fn shape_mismatch_checksum_and_missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        let w = sample();
        save_weights(&w, &p).unwrap();

        let text = fs::read_to_string(&p).unwrap().replace("\"shape\": [\n        2,\n        3\n      ]", "\"shape\": [\n        3,\n        2\n      ]");
        fs::write(&p, &text).unwrap();
        assert!(matches!(load_weights(&p, Some(&w.shapes())), Err(IoError::ShapeMismatch { .. })));

        save_weights(&w, &p).unwrap();
        let mut blob = fs::read(blob_path(&p)).unwrap();
        blob[0] ^= 1;
        fs::write(blob_path(&p), &blob).unwrap();
        assert!(matches!(load_weights(&p, None), Err(IoError::Checksum { .. })));

        fs::remove_file(blob_path(&p)).unwrap();
        assert!(matches!(load_weights(&p, None), Err(IoError::Io { .. })));

        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_weights(&p, None), Err(IoError::Json { .. })));
    }
}
