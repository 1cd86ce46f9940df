//! Property tests for the invariants each module promises.

use std::f64::consts::PI;

use pillar3d::augment::{global_augment, shape_aware_augment, AugmentParams, GlobalAugParams};
use pillar3d::eval::{average_precision_40, evaluate_dataset, EvalConfig, EvalFrame};
use pillar3d::geometry::{apply_transform, bev_iou, iou_3d, Mat3};
use pillar3d::io::{decode_pcd, encode_pcd, from_openlabel_json, load_weights, save_weights, to_openlabel_json, FrameLabels, PcdEncoding};
use pillar3d::losses::{ema_update, od_iou_loss, student_total_loss, LossComponents, LossWeights};
use pillar3d::neural::ops::{bn_relu_rows, conv2d, sigmoid};
use pillar3d::neural::{init_weights, pillar_encoder_forward, ArchitectureConfig};
use pillar3d::postprocess::{di_nms, rectify_confidence, standard_nms, NmsParams};
use pillar3d::preprocess::{gather, pillarize, scatter, PillarGridConfig};
use pillar3d::registration::{estimate_rigid, voxel_downsample};
use pillar3d::{Box3D, ClassList, DenseTensor, Detection, LabeledBox, LabeledFrame, Point3, PointCloud, RigidTransform, Vec3};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3D<f64>> {
    (-20.0..20.0f64, -20.0..20.0f64, -1.0..2.0f64, 0.5..6.0f64, 0.5..3.0f64, 0.5..3.0f64, -PI..PI)
        .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new(x, y, z, l, w, h, yaw).unwrap())
}

fn arb_near_pair() -> impl Strategy<Value = (Box3D<f64>, Box3D<f64>)> {
    (arb_box(), -3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, 0.5..6.0f64, 0.5..3.0f64, 0.5..3.0f64, -PI..PI).prop_map(|(a, dx, dy, dz, l, w, h, yaw)| {
        let b = Box3D::new(a.cx + dx, a.cy + dy, a.cz + dz, l, w, h, yaw).unwrap();
        (a, b)
    })
}

fn arb_points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point3<f64>>> {
    prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64, -2.0..4.0f64, 0.0..=1.0f64), n)
        .prop_map(|v| v.into_iter().map(|(x, y, z, i)| Point3::new(x, y, z, i)).collect())
}

fn arb_transform() -> impl Strategy<Value = RigidTransform<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64, -PI..PI, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(ax, ay, az, angle, tx, ty, tz)| {
        RigidTransform { rotation: Mat3::axis_angle(Vec3::new(ax, ay, az), angle), translation: Vec3::new(tx, ty, tz) }
    })
}

fn arb_dets(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Detection<f64>>> {
    prop::collection::vec((arb_box(), 0usize..3, 0.0..=1.0f64, 0.0..=1.0f64), n)
        .prop_map(|v| v.into_iter().map(|(b, c, s, q)| Detection::new(b, c, s, q).unwrap()).collect())
}

fn dist(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    (a - b).norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_symmetric_and_bounded((a, b) in arb_near_pair()) {
        let (ab, ba) = (bev_iou(&a, &b).unwrap(), bev_iou(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        let (ab3, ba3) = (iou_3d(&a, &b).unwrap(), iou_3d(&b, &a).unwrap());
        prop_assert!((ab3 - ba3).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab3));
        prop_assert!((bev_iou(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn iou_3d_bounded_by_bev_at_equal_heights((a, b) in arb_near_pair()) {
        let b = Box3D::new(b.cx, b.cy, a.cz, b.l, b.w, a.h, b.yaw).unwrap();
        prop_assert!(iou_3d(&a, &b).unwrap() <= bev_iou(&a, &b).unwrap() + 1e-12);
    }

    #[test]
    fn transforms_are_isometries(pts in arb_points(2..40), t in arb_transform()) {
        let cloud = PointCloud::from_points(pts);
        let moved = apply_transform(&t, &cloud);
        for i in 1..cloud.len() {
            let before = dist(cloud.points[i].pos(), cloud.points[i - 1].pos());
            let after = dist(moved.points[i].pos(), moved.points[i - 1].pos());
            prop_assert!((before - after).abs() <= 1e-9);
        }
        prop_assert!(t.validate().is_ok());
    }

    #[test]
    fn box_yaw_is_normalized(yaw in -50.0..50.0f64) {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, yaw).unwrap();
        prop_assert!(b.yaw > -PI && b.yaw <= PI);
        prop_assert!(((b.yaw - yaw) / (2.0 * PI) - ((b.yaw - yaw) / (2.0 * PI)).round()).abs() < 1e-9);
    }

    #[test]
    fn pcd_round_trips(pts in prop::collection::vec((-1e3..1e3f32, -1e3..1e3f32, -1e2..1e2f32, 0.0..=1.0f32), 0..200), stamp in any::<u32>()) {
        let cloud = PointCloud::new(pts.into_iter().map(|(x, y, z, i)| Point3::new(x, y, z, i)).collect(), stamp as u64);
        for enc in [PcdEncoding::Binary, PcdEncoding::Ascii] {
            let back: PointCloud<f32> = decode_pcd(&encode_pcd(&cloud, enc)).unwrap();
            prop_assert_eq!(&back.points, &cloud.points);
        }
    }

    #[test]
    fn openlabel_round_trips(boxes in prop::collection::vec((arb_box(), 0usize..3), 0..12), scored in any::<bool>()) {
        let classes = ClassList::default();
        let n = boxes.len();
        let labels = FrameLabels {
            frame_id: "f".into(),
            boxes: boxes.into_iter().enumerate().map(|(i, (b, c))| LabeledBox { bbox: b, class_id: c, instance_id: format!("id{i:04}") }).collect(),
            scores: (scored && n > 0).then(|| (0..n).map(|i| i as f64 / (n as f64 + 1.0)).collect()),
        };
        let back: FrameLabels<f64> = from_openlabel_json(&to_openlabel_json(&labels, &classes).unwrap(), &classes).unwrap();
        prop_assert_eq!(back, labels);
    }

    #[test]
    fn rigid_estimate_is_a_rotation(pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 3..50), t in arb_transform()) {
        let pairs: Vec<_> = pts.iter().map(|&(x, y, z)| {
            let p = Vec3::new(x, y, z);
            (p, t.apply(p))
        }).collect();
        if let Ok(r) = estimate_rigid(&pairs) {
            let rtr = r.rotation.transpose().mul_mat(&r.rotation);
            prop_assert!(rtr.max_abs_diff(&Mat3::identity()) <= 1e-9);
            prop_assert!((r.rotation.det() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn voxel_downsample_is_idempotent(pts in arb_points(0..300), size in 0.3..4.0f64) {
        let once = voxel_downsample(&PointCloud::from_points(pts), size);
        prop_assert_eq!(voxel_downsample(&once, size), once);
    }

    #[test]
    fn pillarize_conserves_counts_and_centers_decorations(pts in arb_points(0..400), n in 1usize..6) {
        let grid = PillarGridConfig {
            x_range: [-32.0, 32.0],
            y_range: [-32.0, 32.0],
            z_range: [-3.0, 5.0],
            pillar_size_x: 2.0,
            pillar_size_y: 2.0,
            max_points_per_pillar: n,
            ..PillarGridConfig::default()
        };
        let cloud = PointCloud::from_points(pts);
        let set = pillarize(&cloud, &grid).unwrap();
        let in_range = cloud.points.iter().filter(|p| p.x >= -32.0 && p.x < 32.0 && p.y >= -32.0 && p.y < 32.0 && p.z >= -3.0 && p.z <= 5.0).count();
        prop_assert_eq!(set.raw_counts.iter().sum::<usize>(), in_range);
        let mut coords = set.coords.clone();
        coords.dedup();
        prop_assert_eq!(coords.len(), set.len());
        for (p, &k) in set.point_counts.iter().enumerate() {
            prop_assert!(k >= 1 && k <= n);
            for col in 4..7 {
                let mean: f64 = (0..k).map(|r| set.features.data()[(p * n + r) * 9 + col] as f64).sum::<f64>() / k as f64;
                prop_assert!(mean.abs() <= 1e-5, "pillar {} column {} mean {}", p, col, mean);
            }
        }
        // scatter then gather returns the pillar rows.
        let feats = DenseTensor::from_vec(&[set.len(), 3], (0..set.len() * 3).map(|i| i as f32 + 0.5).collect()).unwrap();
        let image = scatter(&feats, &set.coords, grid.height(), grid.width()).unwrap();
        prop_assert!(gather(&image, &set.coords).unwrap().bit_eq(&feats));
    }

    #[test]
    fn encoder_is_finite_and_deterministic(pts in arb_points(1..300), seed in 0u64..1000) {
        let grid = PillarGridConfig { x_range: [-32.0, 32.0], y_range: [-32.0, 32.0], z_range: [-3.0, 5.0], pillar_size_x: 4.0, pillar_size_y: 4.0, ..PillarGridConfig::default() };
        let set = pillarize(&PointCloud::from_points(pts), &grid).unwrap();
        let w = init_weights(&ArchitectureConfig::small(), seed).unwrap();
        let a = pillar_encoder_forward(&set, &w).unwrap();
        prop_assert!(a.all_finite());
        prop_assert!(a.bit_eq(&pillar_encoder_forward(&set, &w).unwrap()));
    }

    #[test]
    fn sigmoid_gates_stay_open(x in -60.0..60.0f32) {
        let s = sigmoid(x);
        prop_assert!(s >= 0.0 && s <= 1.0);
        if x.abs() < 15.0 {
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn batch_norm_is_positively_homogeneous(xs in prop::collection::vec(-5.0..5.0f32, 8), k in prop_oneof![Just(0.5f32), Just(2.0f32), Just(4.0f32)]) {
        let scale = DenseTensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 1.5]).unwrap();
        let shift = DenseTensor::zeros(&[4]);
        let mut a = xs.clone();
        bn_relu_rows(&mut a, 4, &scale, &shift);
        let mut b: Vec<f32> = xs.iter().map(|v| v * k).collect();
        bn_relu_rows(&mut b, 4, &scale, &shift);
        for (u, v) in a.iter().zip(&b) {
            prop_assert_eq!(u * k, *v);
        }
    }

    #[test]
    fn conv_keeps_finite_inputs_finite(vals in prop::collection::vec(-1e3..1e3f32, 2 * 5 * 5), k in 1usize..4) {
        let x = DenseTensor::from_vec(&[2, 5, 5], vals).unwrap();
        let w = DenseTensor::filled(&[3, 2, k, k], 0.25);
        let y = conv2d(&x, &w, &DenseTensor::zeros(&[3]), 1, 1).unwrap();
        prop_assert!(y.all_finite());
    }

    #[test]
    fn nms_keeps_an_antichain(dets in arb_dets(0..60), thr in 0.05..0.9f64) {
        let kept = standard_nms(&dets, thr, 0.0);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].class_id == kept[j].class_id {
                    prop_assert!(bev_iou(&kept[i].bbox, &kept[j].bbox).unwrap() < thr);
                }
            }
        }
        let p = NmsParams { iou_threshold: thr, score_threshold: 0.0, ..NmsParams::default() };
        prop_assert_eq!(di_nms(&dets, &p).unwrap().len(), kept.len());
    }

    #[test]
    fn rectification_is_monotone_in_score(a in 0.0..=1.0f64, b in 0.0..=1.0f64, q in 0.0..=1.0f64, beta in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rectify_confidence(lo, q, beta) <= rectify_confidence(hi, q, beta));
    }

    #[test]
    fn od_iou_loss_is_rigid_invariant((a, b) in arb_near_pair(), yaw in -PI..PI, tx in -50.0..50.0f64, ty in -50.0..50.0f64, tz in -2.0..2.0f64) {
        let t = RigidTransform::from_yaw(yaw, Vec3::new(tx, ty, tz));
        let move_box = |x: &Box3D<f64>| {
            let c = t.apply(x.center());
            Box3D::new(c.x, c.y, c.z, x.l, x.w, x.h, x.yaw + yaw).unwrap()
        };
        let before = od_iou_loss(&a, &b, 1.0, 1.0).unwrap();
        let after = od_iou_loss(&move_box(&a), &move_box(&b), 1.0, 1.0).unwrap();
        prop_assert!((before.value - after.value).abs() <= 1e-9, "{} vs {}", before.value, after.value);
    }

    #[test]
    fn total_loss_is_linear(c in prop::array::uniform5(0.0..10.0f64), w in prop::array::uniform4(0.0..5.0f64), k in 0usize..5, extra in 0.0..3.0f64) {
        let weights = LossWeights { omega1: w[0], omega2: w[1], lambda: w[2], mu_t: w[3] };
        let comps = LossComponents { cls: c[0], od_iou: c[1], dir: c[2], iou_pred: c[3], consistency: c[4] };
        let mut bumped = comps;
        let coef = [1.0, w[0], w[1], w[2], w[3]][k];
        match k {
            0 => bumped.cls += extra,
            1 => bumped.od_iou += extra,
            2 => bumped.dir += extra,
            3 => bumped.iou_pred += extra,
            _ => bumped.consistency += extra,
        }
        let t0 = student_total_loss(&comps, &weights).unwrap().total;
        let t1 = student_total_loss(&bumped, &weights).unwrap().total;
        prop_assert!((t1 - t0 - coef * extra).abs() <= 1e-9);
    }

    #[test]
    fn ema_twice_equals_squared_decay(d in 0.0..=1.0f64, seed in 0u64..50) {
        let cfg = ArchitectureConfig::small();
        let (t, s) = (init_weights(&cfg, seed).unwrap(), init_weights(&cfg, seed + 1).unwrap());
        let twice = ema_update(&ema_update(&t, &s, d).unwrap(), &s, d).unwrap();
        let once = ema_update(&t, &s, d * d).unwrap();
        for (a, b) in twice.params.values().zip(once.params.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn deleting_false_positives_never_lowers_ap(flags in prop::collection::vec(any::<bool>(), 1..40), extra_gt in 0usize..5, drop in any::<prop::sample::Index>()) {
        let num_gt = flags.iter().filter(|&&f| f).count() + extra_gt;
        prop_assume!(num_gt > 0);
        let fps: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
        prop_assume!(!fps.is_empty());
        let mut fewer = flags.clone();
        fewer.remove(fps[drop.index(fps.len())]);
        let (a, b) = (average_precision_40(&flags, num_gt).unwrap(), average_precision_40(&fewer, num_gt).unwrap());
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn map_is_the_mean_of_class_aps(gts in prop::collection::vec((arb_box(), 0usize..3), 1..20), dets in arb_dets(0..30)) {
        let classes = ClassList::default();
        let frame = EvalFrame {
            detections: dets,
            ground_truth: gts.into_iter().enumerate().map(|(i, (b, c))| LabeledBox { bbox: b, class_id: c, instance_id: i.to_string() }).collect(),
        };
        let cfg = EvalConfig::default();
        let r = evaluate_dataset(&[frame], &classes, &cfg).unwrap();
        for m in &r.maps {
            let aps: Vec<f64> = r.entries.iter().filter(|e| e.bin == m.bin && e.metric == m.metric && e.threshold == m.threshold).filter_map(|e| e.ap).collect();
            let mean = if aps.is_empty() { None } else { Some(aps.iter().sum::<f64>() / aps.len() as f64) };
            match (m.map, mean) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
        for e in &r.entries {
            prop_assert!(e.tp <= e.num_gt);
        }
    }
}

fn car_frame(seed: u64) -> LabeledFrame<f64> {
    use pillar3d::synth::{simulate_frame, SceneConfig, SensorConfig};
    let sensor = SensorConfig { channels: 16, azimuth_steps: 512, ..SensorConfig::default() };
    simulate_frame(&SceneConfig { seed, ..SceneConfig::default() }, &sensor, &ClassList::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shape_aware_ops_keep_labels(seed in any::<u64>(), frame_seed in 0u64..4) {
        let frame = car_frame(frame_seed);
        let out = shape_aware_augment(&frame, &AugmentParams::default(), seed).unwrap();
        prop_assert_eq!(&out.boxes, &frame.boxes);
        prop_assert_eq!(out, shape_aware_augment(&frame, &AugmentParams::default(), seed).unwrap());
    }

    #[test]
    fn global_augment_is_a_similarity(seed in any::<u64>()) {
        let frame = car_frame(1);
        let params = AugmentParams { global: GlobalAugParams { scale_range: [0.8, 1.2], ..GlobalAugParams::default() }, ..AugmentParams::identity() };
        let out = global_augment(&frame, &params, seed).unwrap();
        let k = out.boxes[0].bbox.l / frame.boxes[0].bbox.l;
        prop_assert!((0.8..=1.2).contains(&k));
        for i in (1..frame.cloud.len()).step_by(97) {
            let before = dist(frame.cloud.points[i].pos(), frame.cloud.points[i - 1].pos());
            let after = dist(out.cloud.points[i].pos(), out.cloud.points[i - 1].pos());
            prop_assert!((after - k * before).abs() <= 1e-9 * (1.0 + before));
        }
    }
}

#[test]
fn weights_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ArchitectureConfig::small();
    let w = init_weights(&cfg, 17).unwrap();
    let path = dir.path().join("w.json");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path, Some(&pillar3d::neural::param_shapes(&cfg))).unwrap();
    assert!(back.bit_eq(&w));
    // A blob that no longer matches its checksum is rejected.
    let blob = pillar3d::io::blob_path(&path);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(load_weights(&path, None).is_err());
}
