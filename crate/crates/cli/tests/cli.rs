use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FAST: &str = r#"
[grid]
x_range = [-51.2, 51.2]
y_range = [-51.2, 51.2]
z_range = [-1.0, 7.0]
pillar_size_x = 0.8
pillar_size_y = 0.8

[architecture]
ta_dims = [16, 32]
ta_point_hidden = 8
pfn_out = 32
backbone_channels = [16, 32, 64]
fused_channels = 32

[sensor]
channels = 32
azimuth_steps = 512
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pillar3d"));
    c.env_remove("PILLAR3D_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fast_config(dir: &Path) -> PathBuf {
    let p = dir.join("fast.toml");
    fs::write(&p, FAST).unwrap();
    p
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["infer"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["synth", "--frames", "1"]).status.code(), Some(1), "missing --out");
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["--dump-config", "--config", s(&fast_config(dir.path()))]);
    let dumped = dir.path().join("dumped.toml");
    fs::write(&dumped, &first.stdout).unwrap();
    let second = ok(&["--dump-config", "--config", s(&dumped)]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("pillar_size_x = 0.8"));

    // Environment variable fallback.
    let env = bin().arg("--dump-config").env("PILLAR3D_CONFIG", &dumped).output().unwrap();
    assert_eq!(env.stdout, second.stdout);
}

#[test]
fn bad_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (name, text) in [("typo.toml", "[nms]\niou_treshold = 0.5\n"), ("range.toml", "[nms]\niou_threshold = 2.0\n")] {
        let cfg = dir.path().join(name);
        fs::write(&cfg, text).unwrap();
        for args in [
            vec!["--config", s(&cfg), "--out", s(&out), "synth", "--frames", "1"],
            vec!["--config", s(&cfg), "--out", s(&out), "init-weights"],
        ] {
            let o = run(&args);
            assert_eq!(o.status.code(), Some(2), "{name}");
            assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        }
    }
    assert!(!out.exists());
    assert_eq!(run(&["--config", s(&dir.path().join("missing.toml")), "--dump-config"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out", s(&dir.path().join("g.pcd")), "ground-remove", "--input", s(&dir.path().join("nope.pcd"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_infer_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", s(&cfg), "--seed", "3", "--out", s(&data), "synth", "--frames", "2"]);
    let manifest = data.join("manifest.txt");
    assert!(manifest.exists() && data.join("frame_000001.pcd").exists());

    let weights = dir.path().join("w/model.json");
    ok(&["--config", s(&cfg), "--seed", "5", "--out", s(&weights), "init-weights"]);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", s(&cfg), "--out", s(&a), "infer", "--manifest", s(&manifest), "--weights", s(&weights)]);
    ok(&["--config", s(&cfg), "--jobs", "1", "--out", s(&b), "infer", "--manifest", s(&manifest), "--weights", s(&weights)]);
    for name in ["frame_000000.csv", "frame_000000.json", "frame_000001.csv", "frame_000001.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let header = fs::read_to_string(a.join("frame_000000.csv")).unwrap();
    assert!(header.starts_with("frame,class,score,"));

    let report = dir.path().join("report.csv");
    let o = ok(&["--config", s(&cfg), "--out", s(&report), "eval", "--pred", s(&a), "--gt", s(&data)]);
    assert!(!o.stdout.is_empty());
    assert!(fs::read_to_string(&report).unwrap().lines().count() > 1);

    let labels = fs::read_to_string(data.join("frame_000000.json")).unwrap();
    assert!(labels.contains("cuboid"));
    let o = ok(&["--config", s(&cfg), "loss-audit", "--pred", s(&a.join("frame_000000.csv")), "--gt", s(&data.join("frame_000000.json"))]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"total\""));
}

#[test]
fn per_point_commands_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", s(&cfg), "--out", s(&data), "synth", "--frames", "1"]);
    let pcd = data.join("frame_000000.pcd");
    let labels = data.join("frame_000000.json");

    let g = dir.path().join("ground/above.pcd");
    ok(&["--config", s(&cfg), "--out", s(&g), "ground-remove", "--input", s(&pcd)]);
    assert!(fs::metadata(&g).unwrap().len() < fs::metadata(&pcd).unwrap().len());

    let o = ok(&["--config", s(&cfg), "pillarize", "--input", s(&pcd)]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"height\":128"));

    let aug = dir.path().join("aug");
    ok(&["--config", s(&cfg), "--seed", "9", "--out", s(&aug), "augment", "--input", s(&pcd), "--labels", s(&labels)]);
    assert!(aug.join("frame_000000.pcd").exists() && aug.join("frame_000000.json").exists());

    let tf = dir.path().join("tf.json");
    let hist = dir.path().join("hist.csv");
    ok(&["--config", s(&cfg), "--out", s(&tf), "register", "--source", s(&g), "--target", s(&g), "--history", s(&hist)]);
    let tf_text = fs::read_to_string(&tf).unwrap();
    assert!(tf_text.contains("\"rotation\"") && tf_text.contains("\"rmse\": 0.0"));
    assert!(fs::read_to_string(&hist).unwrap().starts_with("iteration,objective,rmse"));
    assert!(files_under(dir.path()).len() >= 8);
}

#[test]
fn bench_stages_sum_to_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let o = ok(&["--config", s(&cfg), "bench", "--repeat", "3"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(names, ["ground", "pillarize", "encoder", "backbone", "head", "nms", "sum", "total"]);
    let stages: f64 = rows[..6].iter().map(|r| r.1).sum();
    let total = rows[7].1;
    assert!(total > 0.0);
    assert!((total - stages).abs() <= 0.05 * total, "stages {stages} ms vs total {total} ms");
}
