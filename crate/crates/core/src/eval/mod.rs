//! Average precision with 40 recall positions, pooled over frames, per
//! class, distance bin, metric and IoU threshold.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{ClassList, LabeledBox};
use crate::geometry::{bev_iou_unchecked, iou_3d_unchecked, Box3D};
use crate::postprocess::Detection;
use crate::scalar::Real;

pub const RECALL_POSITIONS: usize = 40;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("class id {id} outside the {num_classes} configured classes")]
    UnknownClass { id: usize, num_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bev => "bev",
            Metric::ThreeD => "3d",
        }
    }

    pub fn iou<T: Real>(self, a: &Box3D<T>, b: &Box3D<T>) -> T {
        match self {
            Metric::Bev => bev_iou_unchecked(a, b),
            Metric::ThreeD => iou_3d_unchecked(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub metrics: Vec<Metric>,
    /// Bin edges in meters; `[0, 30, 50]` gives 0–30, 30–50 and ≥ 50.
    /// An extra bin covering every range is always reported as `all`.
    pub distance_edges: Vec<f64>,
    /// `[from, to]` class-id remaps applied to detections and ground truth.
    #[serde(default)]
    pub class_merge: Vec<[usize; 2]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.7, 0.5, 0.25], metrics: vec![Metric::ThreeD, Metric::Bev], distance_edges: vec![0.0, 30.0, 50.0], class_merge: Vec::new() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.thresholds.is_empty() || self.metrics.is_empty() {
            return bad("need at least one threshold and one metric".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return bad(format!("threshold {t} outside (0, 1]"));
        }
        if self.distance_edges.is_empty() || self.distance_edges.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return bad("distance edges must be finite and ≥ 0".into());
        }
        if self.distance_edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("distance edges {:?} must be strictly increasing", self.distance_edges));
        }
        Ok(())
    }

    /// Bin names in report order, `all` last.
    pub fn bin_names(&self) -> Vec<String> {
        let e = &self.distance_edges;
        let mut names: Vec<String> = e.windows(2).map(|w| format!("{}-{}m", w[0], w[1])).collect();
        names.push(format!(">{}m", e[e.len() - 1]));
        names.push("all".into());
        names
    }

    /// Distance bin of a range value, or `None` below the first edge.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        let e = &self.distance_edges;
        if d < e[0] {
            return None;
        }
        Some(e.iter().rposition(|&x| d >= x).expect("d ≥ first edge"))
    }

    fn merged(&self, id: usize) -> usize {
        self.class_merge.iter().find(|m| m[0] == id).map_or(id, |m| m[1])
    }
}

/// Result of greedily matching one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMatch {
    /// Ground-truth index matched by each detection.
    pub det_match: Vec<Option<usize>>,
    /// Detection index matched to each ground truth.
    pub gt_match: Vec<Option<usize>>,
}

impl FrameMatch {
    pub fn tp_flags(&self) -> Vec<bool> {
        self.det_match.iter().map(Option::is_some).collect()
    }
}

/// Walks `dets` in the given order (expected: descending rectified score);
/// each takes the unmatched same-class ground truth of highest IoU (ties to
/// the lower index) if that IoU reaches `threshold`.
pub fn match_frame<T: Real>(dets: &[Detection<T>], gts: &[LabeledBox<T>], threshold: T, metric: Metric) -> FrameMatch {
    let mut gt_match = vec![None; gts.len()];
    let det_match = dets
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let mut best: Option<(usize, T)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if gt_match[gi].is_some() || g.class_id != d.class_id {
                    continue;
                }
                let iou = metric.iou(&d.bbox, &g.bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let gi = best.map(|b| b.0)?;
            gt_match[gi] = Some(di);
            Some(gi)
        })
        .collect();
    FrameMatch { det_match, gt_match }
}

/// Interpolated AP over recall positions `1/40 … 40/40`. `flags` are the
/// TP flags sorted by descending score. `None` when `num_gt` is zero.
pub fn average_precision_40(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        pr.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // suffix maximum of precision
    let mut best = 0.0f64;
    let mut interp = vec![0.0; pr.len()];
    for i in (0..pr.len()).rev() {
        best = best.max(pr[i].1);
        interp[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 1..=RECALL_POSITIONS {
        let r = k as f64 / RECALL_POSITIONS as f64;
        while j < pr.len() && pr[j].0 < r - 1e-12 {
            j += 1;
        }
        if j < pr.len() {
            sum += interp[j];
        }
    }
    Some(sum / RECALL_POSITIONS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: String,
    pub bin: String,
    pub metric: Metric,
    pub threshold: f64,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub bin: String,
    pub metric: Metric,
    pub threshold: f64,
    /// Mean over classes with at least one ground truth.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<ApEntry>,
    pub maps: Vec<MapEntry>,
}

impl EvalReport {
    pub fn ap(&self, class: &str, bin: &str, metric: Metric, threshold: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.class == class && e.bin == bin && e.metric == metric && e.threshold == threshold)?.ap
    }

    pub fn map(&self, bin: &str, metric: Metric, threshold: f64) -> Option<f64> {
        self.maps.iter().find(|e| e.bin == bin && e.metric == metric && e.threshold == threshold)?.map
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,bin,metric,threshold,ap,tp,fp,fn,num_gt\n");
        for e in &self.entries {
            let ap = e.ap.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{},{},{},{},{},{},{},{}", e.class, e.bin, e.metric.name(), e.threshold, ap, e.tp, e.fp, e.fn_, e.num_gt);
        }
        for m in &self.maps {
            let v = m.map.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "mAP,{},{},{},{},,,,", m.bin, m.metric.name(), m.threshold, v);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<9} {:<4} {:>5} {:>8} {:>6} {:>6} {:>6}\n", "class", "bin", "iou", "thr", "AP", "TP", "FP", "FN");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.4}", v));
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<8} {:<9} {:<4} {:>5} {:>8} {:>6} {:>6} {:>6}",
                e.class,
                e.bin,
                e.metric.name(),
                e.threshold,
                fmt(e.ap),
                e.tp,
                e.fp,
                e.fn_
            );
        }
        for m in &self.maps {
            let _ = writeln!(s, "{:<8} {:<9} {:<4} {:>5} {:>8}", "mAP", m.bin, m.metric.name(), m.threshold, fmt(m.map));
        }
        s
    }
}

/// One frame's detections and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame<T> {
    pub detections: Vec<Detection<T>>,
    pub ground_truth: Vec<LabeledBox<T>>,
}

struct Pool {
    scored: Vec<(f64, usize, bool)>,
    num_gt: usize,
    fn_: usize,
}

/// Pools matches across frames. Each ground truth lands in the bin of its
/// sensor range. Within a bin, detections matched to ground truths of other
/// bins are ignored, and unmatched detections are false positives only in
/// the bin of their own range.
pub fn evaluate_dataset<T: Real>(frames: &[EvalFrame<T>], classes: &ClassList, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let nc = classes.len();
    let frames: Vec<EvalFrame<T>> = frames
        .iter()
        .map(|f| {
            let mut dets: Vec<Detection<T>> = f.detections.iter().map(|d| Detection { class_id: cfg.merged(d.class_id), ..*d }).collect();
            dets.sort_by(|a, b| b.rectified_score.partial_cmp(&a.rectified_score).unwrap_or(std::cmp::Ordering::Equal));
            let gts = f.ground_truth.iter().map(|g| LabeledBox { class_id: cfg.merged(g.class_id), ..g.clone() }).collect();
            EvalFrame { detections: dets, ground_truth: gts }
        })
        .collect();
    for f in &frames {
        let bad = f.detections.iter().map(|d| d.class_id).chain(f.ground_truth.iter().map(|g| g.class_id)).find(|&c| c >= nc);
        if let Some(id) = bad {
            return Err(EvalError::UnknownClass { id, num_classes: nc });
        }
    }
    let bins = cfg.bin_names();
    let nb = bins.len();
    let all = nb - 1;
    let mut report = EvalReport::default();
    for &metric in &cfg.metrics {
        for &thr in &cfg.thresholds {
            let matches: Vec<FrameMatch> = frames.par_iter().map(|f| match_frame(&f.detections, &f.ground_truth, T::lit(thr), metric)).collect();
            let mut pools: Vec<Pool> = (0..nc * nb).map(|_| Pool { scored: Vec::new(), num_gt: 0, fn_: 0 }).collect();
            for (fi, (f, m)) in frames.iter().zip(&matches).enumerate() {
                for (g, gm) in f.ground_truth.iter().zip(&m.gt_match) {
                    let b = cfg.bin_of(g.bbox.bev_distance().as_f64());
                    for bin in b.into_iter().chain([all]) {
                        let p = &mut pools[g.class_id * nb + bin];
                        p.num_gt += 1;
                        p.fn_ += usize::from(gm.is_none());
                    }
                }
                for (di, (d, dm)) in f.detections.iter().zip(&m.det_match).enumerate() {
                    let score = d.rectified_score.as_f64();
                    let order = fi << 32 | di;
                    let home = match dm {
                        Some(gi) => cfg.bin_of(f.ground_truth[*gi].bbox.bev_distance().as_f64()),
                        None => cfg.bin_of(d.bbox.bev_distance().as_f64()),
                    };
                    for bin in home.into_iter().chain([all]) {
                        pools[d.class_id * nb + bin].scored.push((score, order, dm.is_some()));
                    }
                }
            }
            for bin in 0..nb {
                let mut aps = Vec::new();
                for c in 0..nc {
                    let p = &mut pools[c * nb + bin];
                    p.scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
                    let flags: Vec<bool> = p.scored.iter().map(|s| s.2).collect();
                    let tp = flags.iter().filter(|&&f| f).count();
                    let ap = average_precision_40(&flags, p.num_gt);
                    if let Some(v) = ap {
                        aps.push(v);
                    }
                    report.entries.push(ApEntry {
                        class: classes.name(c).unwrap_or("?").to_string(),
                        bin: bins[bin].clone(),
                        metric,
                        threshold: thr,
                        ap,
                        tp,
                        fp: flags.len() - tp,
                        fn_: p.fn_,
                        num_gt: p.num_gt,
                    });
                }
                let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
                report.maps.push(MapEntry { bin: bins[bin].clone(), metric, threshold: thr, map });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x: f64, y: f64, class_id: usize) -> LabeledBox<f64> {
        LabeledBox { bbox: Box3D::new(x, y, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap(), class_id, instance_id: format!("{x}-{y}") }
    }

    fn det_of(g: &LabeledBox<f64>, dx: f64, score: f64) -> Detection<f64> {
        Detection::new(g.bbox.with_center(g.bbox.center() + crate::Vec3::new(dx, 0.0, 0.0)), g.class_id, score, 1.0).unwrap()
    }

    #[test]
    fn ap40_hand_cases() {
        assert_eq!(average_precision_40(&[true, true, true], 3), Some(1.0));
        assert_eq!(average_precision_40(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision_40(&[], 3), Some(0.0));
        assert_eq!(average_precision_40(&[true, false], 1), Some(1.0));
        assert_eq!(average_precision_40(&[], 0), None);
        // FP first, then TP: precision 1/2 at full recall
        assert_eq!(average_precision_40(&[false, true], 1), Some(0.5));
        // two gts, TP FP TP: recall 0.5 at precision 1, recall 1 at 2/3
        let want = (0..40).map(|k| if k < 20 { 1.0 } else { 2.0 / 3.0 }).fold(0.0, |a, b| a + b) / 40.0;
        assert_eq!(average_precision_40(&[true, false, true], 2), Some(want));
    }

    #[test]
    fn match_frame_basics() {
        let gts = vec![gt(0.0, 0.0, 0), gt(10.0, 0.0, 0), gt(20.0, 0.0, 1)];
        let dets: Vec<_> = gts.iter().map(|g| det_of(g, 0.0, 0.9)).collect();
        let m = match_frame(&dets, &gts, 0.7, Metric::ThreeD);
        assert_eq!(m.det_match, vec![Some(0), Some(1), Some(2)]);
        let m = match_frame(&[], &gts, 0.7, Metric::ThreeD);
        assert_eq!(m.gt_match, vec![None; 3]);
        // duplicate detection is an FP; wrong class never matches
        let mut wrong = det_of(&gts[0], 0.0, 0.5);
        wrong.class_id = 1;
        let m = match_frame(&[dets[0], dets[0], wrong], &gts, 0.7, Metric::Bev);
        assert_eq!(m.det_match, vec![Some(0), None, None]);
    }

    /// Recursive re-statement of the greedy rule: the first detection takes
    /// its best candidate, then the rest recurse on the remaining boxes.
    fn oracle(dets: &[Detection<f64>], gts: &[LabeledBox<f64>], used: &mut Vec<bool>, thr: f64, metric: Metric) -> Vec<Option<usize>> {
        let Some((d, rest)) = dets.split_first() else { return Vec::new() };
        let cands: Vec<(usize, f64)> = (0..gts.len())
            .filter(|&g| !used[g] && gts[g].class_id == d.class_id)
            .map(|g| (g, metric.iou(&d.bbox, &gts[g].bbox)))
            .filter(|&(_, iou)| iou >= thr)
            .collect();
        let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let pick = cands.iter().find(|c| c.1 == max).map(|c| c.0);
        if let Some(g) = pick {
            used[g] = true;
        }
        let mut out = vec![pick];
        out.extend(oracle(rest, gts, used, thr, metric));
        out
    }

    #[test]
    fn match_frame_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let gts: Vec<_> = (0..rng.random_range(0..=6)).map(|_| gt(rng.random_range(0.0..8.0), rng.random_range(0.0..4.0), rng.random_range(0..2))).collect();
            let dets: Vec<_> = (0..rng.random_range(0..=6))
                .map(|_| {
                    let b = Box3D::new(rng.random_range(0.0..8.0), rng.random_range(0.0..4.0), 0.0, 4.0, 2.0, 1.5, rng.random_range(-0.5..0.5)).unwrap();
                    Detection::new(b, rng.random_range(0..2), 0.5, 1.0).unwrap()
                })
                .collect();
            for metric in [Metric::Bev, Metric::ThreeD] {
                let m = match_frame(&dets, &gts, 0.3, metric);
                assert_eq!(m.det_match, oracle(&dets, &gts, &mut vec![false; gts.len()], 0.3, metric));
            }
        }
    }

    #[test]
    fn dataset_perfect_and_empty() {
        let classes = ClassList::default();
        let cfg = EvalConfig::default();
        let frames: Vec<EvalFrame<f64>> = (0..10)
            .map(|i| {
                let g = vec![gt(5.0 + i as f64, 3.0, 0), gt(40.0, -2.0, 1), gt(-70.0, 1.0, 2)];
                EvalFrame { detections: g.iter().map(|b| det_of(b, 0.0, 0.9)).collect(), ground_truth: g }
            })
            .collect();
        let r = evaluate_dataset(&frames, &classes, &cfg).unwrap();
        for e in &r.entries {
            assert!(e.ap.is_none() || e.ap == Some(1.0), "{e:?}");
        }
        assert_eq!(r.map("all", Metric::ThreeD, 0.7), Some(1.0));
        assert_eq!(r.ap("Car", "0-30m", Metric::Bev, 0.5), Some(1.0));
        assert_eq!(r.ap("Car", ">50m", Metric::Bev, 0.5), None);

        let empty: Vec<_> = frames.iter().map(|f| EvalFrame { detections: vec![], ground_truth: f.ground_truth.clone() }).collect();
        let r = evaluate_dataset(&empty, &classes, &cfg).unwrap();
        assert_eq!(r.map("all", Metric::Bev, 0.25), Some(0.0));
        let car = r.entries.iter().find(|e| e.class == "Car" && e.bin == "all").unwrap();
        assert_eq!((car.fn_, car.num_gt, car.tp), (10, 10, 0));
    }

    #[test]
    fn out_of_bin_matches_are_ignored() {
        let classes = ClassList::default();
        let cfg = EvalConfig { thresholds: vec![0.1], metrics: vec![Metric::Bev], ..EvalConfig::default() };
        // gt just inside 30 m, detection center just beyond it
        let g = gt(29.9, 0.0, 0);
        let d = det_of(&g, 0.3, 0.9);
        let r = evaluate_dataset(&[EvalFrame { detections: vec![d], ground_truth: vec![g] }], &classes, &cfg).unwrap();
        let e = |bin: &str| r.entries.iter().find(|e| e.class == "Car" && e.bin == bin).unwrap().clone();
        assert_eq!((e("0-30m").tp, e("0-30m").fp), (1, 0));
        assert_eq!((e("30-50m").tp, e("30-50m").fp, e("30-50m").ap), (0, 0, None));
        // unmatched far detection is an FP only in its own bin
        let far = det_of(&gt(60.0, 0.0, 0), 0.0, 0.9);
        let r = evaluate_dataset(&[EvalFrame { detections: vec![far], ground_truth: vec![gt(10.0, 0.0, 0)] }], &classes, &cfg).unwrap();
        let e = |bin: &str| r.entries.iter().find(|e| e.class == "Car" && e.bin == bin).unwrap().fp;
        assert_eq!((e("0-30m"), e(">50m"), e("all")), (0, 1, 1));
    }

    #[test]
    fn class_merge_and_config_checks() {
        let classes = ClassList::default();
        let cfg = EvalConfig { class_merge: vec![[1, 0]], ..EvalConfig::default() };
        let g = gt(10.0, 0.0, 1);
        let mut d = det_of(&g, 0.0, 0.9);
        d.class_id = 0;
        let r = evaluate_dataset(&[EvalFrame { detections: vec![d], ground_truth: vec![g] }], &classes, &cfg).unwrap();
        assert_eq!(r.ap("Car", "all", Metric::ThreeD, 0.7), Some(1.0));
        assert!(EvalConfig { thresholds: vec![0.0], ..EvalConfig::default() }.validate().is_err());
        assert!(EvalConfig { distance_edges: vec![0.0, 50.0, 30.0], ..EvalConfig::default() }.validate().is_err());
        assert_eq!(EvalConfig::default().bin_names(), vec!["0-30m", "30-50m", ">50m", "all"]);
        let g = gt(10.0, 0.0, 7);
        assert!(matches!(
            evaluate_dataset(&[EvalFrame { detections: vec![], ground_truth: vec![g] }], &classes, &cfg),
            Err(EvalError::UnknownClass { id: 7, .. })
        ));
    }
}
