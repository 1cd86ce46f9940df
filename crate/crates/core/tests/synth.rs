use std::fs;
use std::path::Path;

use pillar3d::io::{read_manifest, read_openlabel, read_pcd};
use pillar3d::synth::{generate_dataset, SceneConfig, SensorConfig};
use pillar3d::ClassList;

fn tiny() -> SensorConfig {
    SensorConfig { channels: 4, azimuth_steps: 32, ..SensorConfig::default() }
}

fn bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn zero_frames_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(0, &SceneConfig::default(), &tiny(), &ClassList::default(), dir.path()).unwrap();
    assert!(read_manifest(&m).unwrap().is_empty());
    assert_eq!(bytes(dir.path()).len(), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let scene = SceneConfig { seed: 42, ..SceneConfig::default() };
    let sensor = SensorConfig { channels: 16, azimuth_steps: 256, ..SensorConfig::default() };
    generate_dataset(2, &scene, &sensor, &ClassList::default(), a.path()).unwrap();
    generate_dataset(2, &scene, &sensor, &ClassList::default(), b.path()).unwrap();
    let (fa, fb) = (bytes(a.path()), bytes(b.path()));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
    // Frames differ from each other.
    assert_ne!(fa[0].1, fa[2].1);
}

#[test]
fn many_frames_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassList::default();
    let m = generate_dataset(2000, &SceneConfig::default(), &tiny(), &classes, dir.path()).unwrap();
    let entries = read_manifest(&m).unwrap();
    assert_eq!(entries.len(), 4000);
    for pair in entries.chunks(2).step_by(199) {
        let cloud = read_pcd::<f64>(&pair[0]).unwrap();
        let labels = read_openlabel::<f64>(&pair[1], &classes).unwrap();
        assert!(!cloud.is_empty());
        assert!(!labels.boxes.is_empty());
        assert_eq!(labels.frame_id, pair[0].file_stem().unwrap().to_string_lossy());
    }
}
