use crate::geometry::Vec3;
use crate::preprocess::PreprocessError;
use crate::scalar::Real;

/// Greedy farthest point sampling starting at `seed`.
///
/// Each step picks the point with the largest distance to the current
/// selection (ties to the lowest index). Returns `k` indices in pick order.
pub fn farthest_point_sample<T: Real>(points: &[Vec3<T>], k: usize, seed: usize) -> Result<Vec<usize>, PreprocessError> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(PreprocessError::InvalidSampleCount { k, n });
    }
    if seed >= n {
        return Err(PreprocessError::InvalidSampleCount { k: seed, n });
    }
    let mut picked = Vec::with_capacity(k);
    picked.push(seed);
    let mut min_d2: Vec<T> = points.iter().map(|p| (*p - points[seed]).norm_sq()).collect();
    // picked points sit below every candidate, so duplicates are never re-picked
    min_d2[seed] = -T::one();
    while picked.len() < k {
        let mut best = usize::MAX;
        let mut best_d = -T::one();
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        picked.push(best);
        min_d2[best] = -T::one();
        let q = points[best];
        for (d, p) in min_d2.iter_mut().zip(points) {
            let nd = (*p - q).norm_sq();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(picked)
}
