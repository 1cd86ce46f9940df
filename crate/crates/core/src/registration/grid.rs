//! Uniform grid index for fixed-radius nearest-neighbor queries.

use crate::geometry::Vec3;
use crate::scalar::Real;

/// Upper bound on allocated cells; the cell edge grows to respect it.
const MAX_CELLS: usize = 1 << 22;

/// Points bucketed into a dense array of uniform cells covering their bounding box.
pub struct GridIndex<T> {
    points: Vec<Vec3<T>>,
    /// Original index of each entry of `points`.
    ids: Vec<usize>,
    /// `starts[c]..starts[c + 1]` is the slice of `points` in cell `c`.
    starts: Vec<u32>,
    origin: Vec3<T>,
    cell: T,
    dims: [usize; 3],
}

impl<T: Real> GridIndex<T> {
    /// Builds an index with cells of (at least) `cell` meters.
    pub fn build(pts: &[Vec3<T>], cell: T) -> Self {
        let mut lo = Vec3::new(T::infinity(), T::infinity(), T::infinity());
        let mut hi = -lo;
        for p in pts {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        if pts.is_empty() {
            lo = Vec3::zero();
            hi = Vec3::zero();
        }
        let ext = hi - lo;
        let mut cell = cell;
        let count = |c: T| -> [usize; 3] {
            [0, 1, 2].map(|k| (ext[k] / c).floor().to_usize().unwrap_or(usize::MAX / 8).saturating_add(1))
        };
        let mut dims = count(cell);
        while dims.iter().fold(1usize, |a, &d| a.saturating_mul(d)) > MAX_CELLS {
            cell = cell * T::lit(1.25);
            dims = count(cell);
        }
        let ncell = dims[0] * dims[1] * dims[2];
        let key = |p: &Vec3<T>| -> usize {
            let c = [0, 1, 2].map(|k| ((p[k] - lo[k]) / cell).floor().to_usize().unwrap_or(0).min(dims[k] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        let keys: Vec<usize> = pts.iter().map(key).collect();
        let mut starts = vec![0u32; ncell + 1];
        for &k in &keys {
            starts[k + 1] += 1;
        }
        for i in 0..ncell {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut points = vec![Vec3::zero(); pts.len()];
        let mut ids = vec![0usize; pts.len()];
        // Stable counting sort keeps ascending original indices within a cell.
        for (i, (&k, p)) in keys.iter().zip(pts).enumerate() {
            let slot = fill[k] as usize;
            points[slot] = *p;
            ids[slot] = i;
            fill[k] += 1;
        }
        Self { points, ids, starts, origin: lo, cell, dims }
    }

    pub fn cell_size(&self) -> T {
        self.cell
    }

    /// Nearest indexed point within `max_dist` of `q`: `(original index, squared distance)`.
    /// Ties are broken toward the lowest original index.
    pub fn nearest_within(&self, q: Vec3<T>, max_dist: T) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let max_d2 = max_dist * max_dist;
        let rel = q - self.origin;
        let qc = [0, 1, 2].map(|k| (rel[k] / self.cell).floor().to_i64().unwrap_or(i64::MIN / 4));
        let reach = (max_dist / self.cell).ceil().to_i64().unwrap_or(0) + 1;
        // Distance from q to the nearest face of its own cell.
        let margin = [0, 1, 2]
            .map(|k| {
                let pos = rel[k] - self.cell * T::from_i64(qc[k]).unwrap_or(T::zero());
                pos.min(self.cell - pos).max(T::zero())
            })
            .into_iter()
            .fold(T::infinity(), T::min);
        let mut best: Option<(usize, T)> = None;
        for r in 0..=reach {
            self.visit_shell(qc, r, |start, end| {
                for s in start..end {
                    let d2 = (self.points[s] - q).norm_sq();
                    if d2 > max_d2 {
                        continue;
                    }
                    let id = self.ids[s];
                    best = match best {
                        Some((bi, bd)) if bd < d2 || (bd == d2 && bi < id) => Some((bi, bd)),
                        _ => Some((id, d2)),
                    };
                }
            });
            // Anything outside shells 0..=r is at least this far from q.
            let bound = self.cell * T::from_i64(r).unwrap() + margin;
            if let Some((_, bd)) = best {
                if bd < bound * bound {
                    break;
                }
            }
        }
        best
    }

    fn visit_shell(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(usize, usize)) {
        let d = self.dims.map(|v| v as i64);
        let range = |k: usize| ((qc[k] - r).max(0), (qc[k] + r).min(d[k] - 1));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for z in z0..=z1 {
            let on_z = (z - qc[2]).abs() == r;
            for y in y0..=y1 {
                let on_y = on_z || (y - qc[1]).abs() == r;
                let row = ((z * d[1] + y) * d[0]) as usize;
                if on_y {
                    if x0 <= x1 {
                        let (a, b) = (self.starts[row + x0 as usize], self.starts[row + x1 as usize + 1]);
                        if a < b {
                            f(a as usize, b as usize);
                        }
                    }
                } else {
                    // r > 0 here, so the two x faces are distinct cells.
                    for x in [qc[0] - r, qc[0] + r] {
                        if x >= x0 && x <= x1 {
                            let c = row + x as usize;
                            let (a, b) = (self.starts[c], self.starts[c + 1]);
                            if a < b {
                                f(a as usize, b as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}
