use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::geometry::Vec3;
use crate::preprocess::{farthest_point_sample, PreprocessError};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

/// Per-point decoration width: x, y, z, intensity, offsets to the pillar mean
/// (3) and offsets to the pillar cell center (2).
pub const DECORATED_FEATURES: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarGridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub pillar_size_x: f64,
    pub pillar_size_y: f64,
    pub max_points_per_pillar: usize,
    pub feature_dim: usize,
}

impl Default for PillarGridConfig {
    /// Forward-facing KITTI-style grid: 432 × 496 pillars of 0.16 m.
    fn default() -> Self {
        Self {
            x_range: [0.0, 69.12],
            y_range: [-39.68, 39.68],
            z_range: [-3.0, 1.0],
            pillar_size_x: 0.16,
            pillar_size_y: 0.16,
            max_points_per_pillar: 32,
            feature_dim: DECORATED_FEATURES,
        }
    }
}

impl PillarGridConfig {
    /// Square grid around an elevated roadside sensor, ground near z = 0.
    pub fn roadside() -> Self {
        Self {
            x_range: [-51.2, 51.2],
            y_range: [-51.2, 51.2],
            z_range: [-1.0, 7.0],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kitti" | "default" => Some(Self::default()),
            "roadside" => Some(Self::roadside()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        for (name, r, s) in [("x", self.x_range, self.pillar_size_x), ("y", self.y_range, self.pillar_size_y)] {
            if !(r[1] > r[0]) || !(s > 0.0) {
                return bad(format!("{name} range {r:?} / pillar size {s} invalid"));
            }
            let cells = (r[1] - r[0]) / s;
            if (cells - cells.round()).abs() > 1e-6 {
                return bad(format!("{name} range {r:?} is not divisible by pillar size {s}"));
            }
        }
        if !(self.z_range[1] > self.z_range[0]) {
            return bad(format!("z range {:?} invalid", self.z_range));
        }
        if self.max_points_per_pillar < 1 {
            return bad("max_points_per_pillar must be ≥ 1".into());
        }
        if self.feature_dim != DECORATED_FEATURES {
            return bad(format!("feature_dim must be {DECORATED_FEATURES}"));
        }
        Ok(())
    }

    /// Grid width (cells along x).
    pub fn width(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.pillar_size_x).round() as usize
    }

    /// Grid height (cells along y).
    pub fn height(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.pillar_size_y).round() as usize
    }

    /// BEV center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range[0] + (col as f64 + 0.5) * self.pillar_size_x,
            self.y_range[0] + (row as f64 + 0.5) * self.pillar_size_y,
        )
    }
}

/// Non-empty pillars with decorated, zero-padded point features.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    /// P × N × C.
    pub features: DenseTensor,
    /// `[row, col]` grid cell of each pillar, sorted row-major and unique.
    pub coords: Vec<[usize; 2]>,
    /// Real (non-pad) rows per pillar, in `1..=N`.
    pub point_counts: Vec<usize>,
    /// Points that fell in each pillar before subsampling.
    pub raw_counts: Vec<usize>,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn max_points(&self) -> usize {
        self.features.dim(1)
    }

    /// Per-pillar arithmetic mean of the real points' xyz (P × 3).
    pub fn centers(&self) -> Vec<[f32; 3]> {
        let (n, c) = (self.features.dim(1), self.features.dim(2));
        let data = self.features.data();
        self.point_counts
            .iter()
            .enumerate()
            .map(|(p, &cnt)| {
                let mut s = [0.0f64; 3];
                for r in 0..cnt {
                    let row = &data[(p * n + r) * c..];
                    for k in 0..3 {
                        s[k] += row[k] as f64;
                    }
                }
                s.map(|v| (v / cnt as f64) as f32)
            })
            .collect()
    }
}

/// Groups in-range points into pillars, subsamples crowded pillars with FPS
/// (seeded at the pillar's lowest point index), decorates every point and
/// zero-pads to `N` rows.
pub fn pillarize<T: Real>(cloud: &PointCloud<T>, cfg: &PillarGridConfig) -> Result<PillarSet, PreprocessError> {
    cfg.validate()?;
    let (w, h, n, c) = (cfg.width(), cfg.height(), cfg.max_points_per_pillar, cfg.feature_dim);
    let ncell = w * h;
    let mut cell_of: Vec<u32> = Vec::with_capacity(cloud.len());
    let mut members: Vec<usize> = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p.x.as_f64(), p.y.as_f64(), p.z.as_f64());
        if x < cfg.x_range[0] || x >= cfg.x_range[1] || y < cfg.y_range[0] || y >= cfg.y_range[1] || z < cfg.z_range[0] || z > cfg.z_range[1] {
            continue;
        }
        let col = (((x - cfg.x_range[0]) / cfg.pillar_size_x) as usize).min(w - 1);
        let row = (((y - cfg.y_range[0]) / cfg.pillar_size_y) as usize).min(h - 1);
        cell_of.push((row * w + col) as u32);
        members.push(i);
    }
    // Counting sort by cell keeps ascending point order inside each cell.
    let mut start = vec![0u32; ncell + 1];
    for &cell in &cell_of {
        start[cell as usize + 1] += 1;
    }
    for i in 0..ncell {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut sorted = vec![0usize; members.len()];
    for (&cell, &i) in cell_of.iter().zip(&members) {
        sorted[fill[cell as usize] as usize] = i;
        fill[cell as usize] += 1;
    }

    let occupied: Vec<usize> = (0..ncell).filter(|&k| start[k + 1] > start[k]).collect();
    let p_count = occupied.len();
    let mut features = vec![0.0f32; p_count * n * c];
    let mut coords = Vec::with_capacity(p_count);
    let mut point_counts = Vec::with_capacity(p_count);
    let mut raw_counts = Vec::with_capacity(p_count);
    let mut positions: Vec<Vec3<T>> = Vec::new();
    for (pi, &cell) in occupied.iter().enumerate() {
        let idx = &sorted[start[cell] as usize..start[cell + 1] as usize];
        let (row, col) = (cell / w, cell % w);
        let chosen: Vec<usize> = if idx.len() > n {
            positions.clear();
            positions.extend(idx.iter().map(|&i| cloud.points[i].pos()));
            let mut pick = farthest_point_sample(&positions, n, 0)?;
            pick.sort_unstable();
            pick.into_iter().map(|k| idx[k]).collect()
        } else {
            idx.to_vec()
        };
        let mut mean = [0.0f64; 3];
        for &i in &chosen {
            let p = &cloud.points[i];
            mean[0] += p.x.as_f64();
            mean[1] += p.y.as_f64();
            mean[2] += p.z.as_f64();
        }
        let inv = 1.0 / chosen.len() as f64;
        mean = mean.map(|v| v * inv);
        let (xc, yc) = cfg.cell_center(row, col);
        for (r, &i) in chosen.iter().enumerate() {
            let p = &cloud.points[i];
            let (x, y, z) = (p.x.as_f64(), p.y.as_f64(), p.z.as_f64());
            let out = &mut features[(pi * n + r) * c..(pi * n + r + 1) * c];
            out.copy_from_slice(&[
                x as f32,
                y as f32,
                z as f32,
                p.intensity.as_f32(),
                (x - mean[0]) as f32,
                (y - mean[1]) as f32,
                (z - mean[2]) as f32,
                (x - xc) as f32,
                (y - yc) as f32,
            ]);
        }
        coords.push([row, col]);
        point_counts.push(chosen.len());
        raw_counts.push(idx.len());
    }
    Ok(PillarSet {
        features: DenseTensor::from_vec(&[p_count, n, c], features).expect("sized above"),
        coords,
        point_counts,
        raw_counts,
    })
}

/// Places pillar feature vectors (P × C) into a zeroed C × H × W pseudo image.
pub fn scatter(features: &DenseTensor, coords: &[[usize; 2]], height: usize, width: usize) -> Result<DenseTensor, PreprocessError> {
    if features.shape().len() != 2 || features.dim(0) != coords.len() {
        return Err(PreprocessError::Shape(format!(
            "features {:?} do not match {} coords",
            features.shape(),
            coords.len()
        )));
    }
    let c = features.dim(1);
    let plane = height * width;
    let mut img = vec![0.0f32; c * plane];
    let mut seen = vec![false; plane];
    let src = features.data();
    for (p, &[row, col]) in coords.iter().enumerate() {
        if row >= height || col >= width {
            return Err(PreprocessError::CoordOutOfRange { row, col, height, width });
        }
        let cell = row * width + col;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(PreprocessError::DuplicateCoord { row, col });
        }
        for ch in 0..c {
            img[ch * plane + cell] = src[p * c + ch];
        }
    }
    Ok(DenseTensor::from_vec(&[c, height, width], img).expect("sized above"))
}

/// Inverse of [`scatter`] on the given cells: C × H × W → P × C.
pub fn gather(image: &DenseTensor, coords: &[[usize; 2]]) -> Result<DenseTensor, PreprocessError> {
    if image.shape().len() != 3 {
        return Err(PreprocessError::Shape(format!("expected C×H×W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut out = Vec::with_capacity(coords.len() * c);
    for &[row, col] in coords {
        if row >= h || col >= w {
            return Err(PreprocessError::CoordOutOfRange { row, col, height: h, width: w });
        }
        for ch in 0..c {
            out.push(image.data()[(ch * h + row) * w + col]);
        }
    }
    Ok(DenseTensor::from_vec(&[coords.len(), c], out).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PillarGridConfig {
        PillarGridConfig {
            x_range: [0.0, 4.0],
            y_range: [-2.0, 2.0],
            z_range: [-1.0, 3.0],
            pillar_size_x: 1.0,
            pillar_size_y: 1.0,
            max_points_per_pillar: 4,
            feature_dim: DECORATED_FEATURES,
        }
    }

    #[test]
    fn presets_validate() {
        let d = PillarGridConfig::default();
        d.validate().unwrap();
        assert_eq!((d.width(), d.height()), (432, 496));
        let r = PillarGridConfig::roadside();
        r.validate().unwrap();
        assert_eq!((r.width(), r.height()), (640, 640));
        let mut bad = small_cfg();
        bad.pillar_size_x = 0.3;
        assert!(bad.validate().is_err());
        bad = small_cfg();
        bad.feature_dim = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoration_and_padding() {
        let pts = vec![
            Point3::new(0.25, -1.75, 0.0, 0.5),
            Point3::new(0.75, -1.25, 1.0, 0.25),
            Point3::new(3.5, 1.5, 2.0, 1.0),
            Point3::new(9.0, 0.0, 0.0, 0.0),  // out of x range
            Point3::new(1.0, 0.0, 5.0, 0.0),  // out of z range
        ];
        let set = pillarize(&PointCloud::from_points(pts), &small_cfg()).unwrap();
        assert_eq!(set.coords, vec![[0, 0], [3, 3]]);
        assert_eq!(set.point_counts, vec![2, 1]);
        assert_eq!(set.features.shape(), &[2, 4, 9]);
        let f = set.features.data();
        assert_eq!(&f[0..9], &[0.25, -1.75, 0.0, 0.5, -0.25, -0.25, -0.5, -0.25, -0.25]);
        assert_eq!(&f[9..18], &[0.75, -1.25, 1.0, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25]);
        assert!(f[18..36].iter().all(|&v| v == 0.0));
        assert_eq!(&f[36..45], &[3.5, 1.5, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(set.centers()[0], [0.5, -1.5, 0.5]);
    }

    #[test]
    fn crowded_pillars_are_subsampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3<f64>> =
            (0..50).map(|_| Point3::xyz(rng.random_range(1.0..2.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
        let set = pillarize(&PointCloud::from_points(pts.clone()), &small_cfg()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.point_counts, vec![4]);
        assert_eq!(set.raw_counts, vec![50]);
        // first row is the lowest-index point, the FPS seed
        assert_eq!(set.features.data()[0], pts[0].x as f32);
        assert_eq!(pillarize(&PointCloud::from_points(pts), &small_cfg()).unwrap(), set);
    }

    #[test]
    fn scatter_gather_round_trip() {
        let feats = DenseTensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let coords = vec![[0, 1], [2, 0], [2, 3]];
        let img = scatter(&feats, &coords, 3, 4).unwrap();
        assert_eq!(img.shape(), &[2, 3, 4]);
        assert_eq!(img.sum(), 21.0);
        assert_eq!(img.data()[1], 1.0);
        assert_eq!(img.data()[12 + 8], 4.0);
        assert!(gather(&img, &coords).unwrap().bit_eq(&feats));
        assert!(matches!(scatter(&feats, &[[0, 1], [0, 1], [1, 1]], 3, 4), Err(PreprocessError::DuplicateCoord { .. })));
        assert!(matches!(scatter(&feats, &[[0, 1], [3, 0], [1, 1]], 3, 4), Err(PreprocessError::CoordOutOfRange { .. })));
    }
}
