use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use pillar3d::augment::augment_frame;
use pillar3d::config::PipelineConfig;
use pillar3d::eval::{evaluate_dataset, EvalFrame};
use pillar3d::io::{load_weights, read_manifest, read_openlabel, read_pcd, save_weights, write_openlabel, write_pcd, FrameLabels};
use pillar3d::losses::{audit_components, student_total_loss, AuditParams};
use pillar3d::neural::{init_weights, param_shapes, Network};
use pillar3d::pipeline::{detections_to_csv, ground_removal, infer_frame, read_detections_csv, InferOutput, StageTimings};
use pillar3d::preprocess::pillarize;
use pillar3d::registration::{icp_point_to_point, voxel_downsample};
use pillar3d::synth::{generate_dataset, simulate_frame, SceneConfig, SensorConfig};
use pillar3d::{Cloud, Det, LabeledBox, LabeledFrame};
use rayon::prelude::*;
use serde_json::json;

use crate::{usage, Classify, Cli, CliError, Command};

pub fn dispatch(command: &Command, cli: &Cli, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = cli.out.as_deref();
    match command {
        Command::Synth { frames } => synth(*frames, cli, cfg),
        Command::Register { source, target, history } => register(source, target, history.as_deref(), out, cfg),
        Command::GroundRemove { input } => ground_remove(input, out, cli.seed, cfg),
        Command::Pillarize { input } => pillarize_cmd(input, out, cli.seed, cfg),
        Command::Augment { input, labels } => augment(input, labels, out, cli.seed, cfg),
        Command::Infer { input, manifest, weights } => infer(input, manifest.as_deref(), weights.as_deref(), out, cli.seed, cfg),
        Command::Eval { pred, gt } => eval(pred, gt, out, cfg),
        Command::LossAudit { pred, gt, teacher } => loss_audit(pred, gt, teacher.as_deref(), out, cfg),
        Command::Bench { input, weights, repeat } => bench(input.as_deref(), weights.as_deref(), *repeat, out, cli.seed, cfg),
        Command::InitWeights => {
            let path = required(out, "init-weights")?;
            let w = init_weights(&cfg.architecture, cli.seed).data()?;
            create_parent(path)?;
            save_weights(&w, path).data()?;
            println!("{} tensors, {} parameters", w.params.len(), w.num_parameters());
            Ok(())
        }
    }
}

fn required<'a>(out: Option<&'a Path>, cmd: &str) -> Result<&'a Path, CliError> {
    out.ok_or_else(|| usage(format!("{cmd} needs --out")))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).with_context(|| format!("creating {}", p.display())).data(),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display())).data()
}

/// Writes to `path`, or stdout when absent.
pub fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            create_parent(p)?;
            fs::write(p, text).with_context(|| format!("writing {}", p.display())).data()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "frame".into())
}

fn load_network(weights: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<Network, CliError> {
    match weights {
        Some(p) => {
            let w = load_weights(p, Some(&param_shapes(&cfg.architecture))).data()?;
            Network::new(cfg.architecture.clone(), w).data()
        }
        None => Network::seeded(cfg.architecture.clone(), seed).data(),
    }
}

fn synth(frames: usize, cli: &Cli, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = required(cli.out.as_deref(), "synth")?;
    let scene = SceneConfig { seed: cli.seed, ..cfg.scene.clone() };
    let manifest = generate_dataset(frames, &scene, &cfg.sensor, &cfg.classes, out).data()?;
    println!("{frames} frames, manifest {}", manifest.display());
    Ok(())
}

fn register(source: &Path, target: &Path, history: Option<&Path>, out: Option<&Path>, cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut src: Cloud = read_pcd(source).data()?;
    let mut tgt: Cloud = read_pcd(target).data()?;
    let voxel = cfg.registration.voxel_size;
    if voxel > 0.0 {
        src = voxel_downsample(&src, voxel);
        tgt = voxel_downsample(&tgt, voxel);
    }
    let r = icp_point_to_point(&src, &tgt, &cfg.registration.icp()).data()?;
    let t = &r.transform;
    if t.rotation.m.iter().flatten().chain([&t.translation.x, &t.translation.y, &t.translation.z]).any(|v| !v.is_finite()) {
        return Err(CliError { code: 3, source: anyhow!("registration produced a non-finite transform") });
    }
    let doc = json!({
        "rotation": t.rotation.m,
        "translation": [t.translation.x, t.translation.y, t.translation.z],
        "rmse": r.rmse,
        "iterations": r.iterations,
        "correspondences": r.correspondences,
    });
    if let Some(h) = history {
        let mut buf = Vec::new();
        r.write_history_csv(&mut buf).internal()?;
        write_text(Some(h), &String::from_utf8(buf).internal()?)?;
    }
    write_text(out, &format!("{}\n", serde_json::to_string_pretty(&doc).internal()?))
}

fn ground_remove(input: &Path, out: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = required(out, "ground-remove")?;
    let cloud: Cloud = read_pcd(input).data()?;
    let (above, plane) = ground_removal(&cloud, &cfg.ground, seed).data()?;
    create_parent(out)?;
    write_pcd(&above, out, cfg.io.pcd_format.into()).data()?;
    let n = plane.normal;
    println!("plane {:.6} {:.6} {:.6} {:.6}; kept {} of {} points", n.x, n.y, n.z, plane.d, above.len(), cloud.len());
    Ok(())
}

fn pillarize_cmd(input: &Path, out: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<(), CliError> {
    let cloud: Cloud = read_pcd(input).data()?;
    let (above, _) = ground_removal(&cloud, &cfg.ground, seed).data()?;
    let set = pillarize(&above, &cfg.grid).data()?;
    let doc = json!({
        "height": cfg.grid.height(),
        "width": cfg.grid.width(),
        "points_in": cloud.len(),
        "points_above_ground": above.len(),
        "pillars": set.len(),
        "max_points_per_pillar": set.max_points(),
        "coords": set.coords,
        "point_counts": set.point_counts,
        "raw_counts": set.raw_counts,
    });
    write_text(out, &format!("{}\n", serde_json::to_string(&doc).internal()?))
}

fn augment(input: &Path, labels: &Path, out: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = required(out, "augment")?;
    let cloud: Cloud = read_pcd(input).data()?;
    let lab: FrameLabels<f64> = read_openlabel(labels, &cfg.classes).data()?;
    let frame = LabeledFrame { frame_id: lab.frame_id, cloud, boxes: lab.boxes };
    let aug = augment_frame(&frame, &cfg.augmentation, seed).data()?;
    create_dir(out)?;
    let name = stem(input);
    write_pcd(&aug.cloud, out.join(format!("{name}.pcd")), cfg.io.pcd_format.into()).data()?;
    write_openlabel(&FrameLabels::new(aug.frame_id.clone(), aug.boxes.clone()), &cfg.classes, out.join(format!("{name}.json"))).data()?;
    println!("{} points, {} boxes", aug.cloud.len(), aug.boxes.len());
    Ok(())
}

fn infer_inputs(input: &[PathBuf], manifest: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    match manifest {
        Some(m) => {
            let entries = read_manifest(m).data()?;
            Ok(entries.into_iter().filter(|p| p.extension().is_some_and(|e| e == "pcd")).collect())
        }
        None => Ok(input.to_vec()),
    }
}

fn check_output(o: &InferOutput) -> Result<(), CliError> {
    let bad = o.detections.iter().any(|d| d.bbox.validate().is_err() || !(0.0..=1.0).contains(&d.rectified_score));
    if bad {
        return Err(CliError { code: 3, source: anyhow!("inference produced an invalid detection") });
    }
    Ok(())
}

fn infer(input: &[PathBuf], manifest: Option<&Path>, weights: Option<&Path>, out: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = required(out, "infer")?;
    let paths = infer_inputs(input, manifest)?;
    let mut stems: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    stems.sort();
    if stems.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError { code: 2, source: anyhow!("input file stems must be unique") });
    }
    let net = load_network(weights, seed, cfg)?;
    create_dir(out)?;
    let counts = paths
        .par_iter()
        .map(|path| {
            let name = stem(path);
            let cloud: Cloud = read_pcd(path).data()?;
            let r = infer_frame(&cloud, cfg, &net, seed).with_context(|| format!("frame {}", path.display())).data()?;
            check_output(&r)?;
            info!("{name}: {} detections, {} pillars, {:.1} ms", r.detections.len(), r.pillars, r.timings.total.as_secs_f64() * 1e3);
            let csv = detections_to_csv(&name, &r.detections, &cfg.classes).data()?;
            write_text(Some(&out.join(format!("{name}.csv"))), &csv)?;
            let boxes = r
                .detections
                .iter()
                .enumerate()
                .map(|(i, d)| LabeledBox { bbox: d.bbox, class_id: d.class_id, instance_id: format!("det_{i:04}") })
                .collect();
            let labels = FrameLabels { frame_id: name.clone(), boxes, scores: Some(r.detections.iter().map(|d| d.rectified_score).collect()) };
            write_openlabel(&labels, &cfg.classes, out.join(format!("{name}.json"))).data()?;
            Ok(r.detections.len())
        })
        .collect::<Result<Vec<usize>, CliError>>()?;
    println!("{} frames, {} detections", counts.len(), counts.iter().sum::<usize>());
    Ok(())
}

fn read_dets(path: &Path, cfg: &PipelineConfig) -> Result<Vec<Det>, CliError> {
    Ok(read_detections_csv(path, &cfg.classes).data()?.into_iter().map(|(_, d)| d).collect())
}

fn eval(pred: &Path, gt: &Path, out: Option<&Path>, cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut labels: Vec<PathBuf> = fs::read_dir(gt)
        .with_context(|| format!("reading {}", gt.display()))
        .data()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    labels.sort();
    if labels.is_empty() {
        return Err(CliError { code: 2, source: anyhow!("no .json labels in {}", gt.display()) });
    }
    let frames = labels
        .iter()
        .map(|l| {
            let truth: FrameLabels<f64> = read_openlabel(l, &cfg.classes).data()?;
            let csv = pred.join(format!("{}.csv", stem(l)));
            let detections = if csv.exists() {
                read_dets(&csv, cfg)?
            } else {
                log::warn!("no detections for {}", stem(l));
                Vec::new()
            };
            Ok(EvalFrame { detections, ground_truth: truth.boxes })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = evaluate_dataset(&frames, &cfg.classes, &cfg.eval).data()?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        write_text(Some(p), &report.to_csv())?;
    }
    Ok(())
}

fn loss_audit(pred: &Path, gt: &Path, teacher: Option<&Path>, out: Option<&Path>, cfg: &PipelineConfig) -> Result<(), CliError> {
    let dets = read_dets(pred, cfg)?;
    let truth: FrameLabels<f64> = read_openlabel(gt, &cfg.classes).data()?;
    let teacher = teacher.map(|t| read_dets(t, cfg)).transpose()?;
    let comps = audit_components(&dets, &truth.boxes, teacher.as_deref(), &cfg.losses.consistency, &AuditParams::default()).data()?;
    let breakdown = student_total_loss(&comps, &cfg.losses.weights).data()?;
    if !breakdown.total.is_finite() {
        return Err(CliError { code: 3, source: anyhow!("loss total is not finite") });
    }
    write_text(out, &format!("{}\n", serde_json::to_string_pretty(&breakdown).internal()?))
}

fn bench(input: Option<&Path>, weights: Option<&Path>, repeat: usize, out: Option<&Path>, seed: u64, cfg: &PipelineConfig) -> Result<(), CliError> {
    if repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let cloud: Cloud = match input {
        Some(p) => read_pcd(p).data()?,
        None => {
            let scene = SceneConfig { seed, ..cfg.scene.clone() };
            simulate_frame(&scene, &SensorConfig::dense(), &cfg.classes).data()?.cloud
        }
    };
    let net = load_network(weights, seed, cfg)?;
    infer_frame(&cloud, cfg, &net, seed).data()?;
    let mut runs: Vec<StageTimings> = (0..repeat).map(|_| infer_frame(&cloud, cfg, &net, seed).map(|r| r.timings)).collect::<Result<_, _>>().data()?;
    runs.sort_by_key(|t| t.total);
    let t = &runs[runs.len() / 2];
    if t.stage_sum() > t.total {
        return Err(CliError { code: 3, source: anyhow!("stage times exceed the total") });
    }
    info!("{} points, {} timed runs", cloud.len(), repeat);
    write_text(out, &t.to_csv())
}
