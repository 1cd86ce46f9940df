//! Pillar encoder: two stacked triple-attention stages followed by a
//! two-layer pillar feature net with max pooling.

use rayon::prelude::*;

use super::attention::{triple_attention_forward, TaWeights};
use super::ops::{bn_relu_rows, linear_rows, masked_max};
use super::{param, NeuralError};
use crate::io::ModelWeights;
use crate::preprocess::{PillarSet, DECORATED_FEATURES};
use crate::tensor::DenseTensor;

/// Mean xyz of each pillar's real rows. Coordinates are sorted before the
/// sum so the result does not depend on row order.
pub(crate) fn pillar_centers(pillars: &PillarSet) -> Vec<[f32; 3]> {
    let (n, c) = (pillars.features.dim(1), pillars.features.dim(2));
    let data = pillars.features.data();
    pillars
        .point_counts
        .iter()
        .enumerate()
        .map(|(p, &cnt)| {
            let mut out = [0.0f32; 3];
            if cnt == 0 {
                return out;
            }
            for (k, o) in out.iter_mut().enumerate() {
                let mut col: Vec<f32> = (0..cnt).map(|r| data[(p * n + r) * c + k]).collect();
                col.sort_by(f32::total_cmp);
                *o = (col.iter().map(|&v| v as f64).sum::<f64>() / cnt as f64) as f32;
            }
            out
        })
        .collect()
}

/// `[a | b]` along channels for the real rows; pad rows stay zero.
fn concat(a: &[f32], ca: usize, b: &[f32], cb: usize, n: usize, counts: &[usize]) -> Vec<f32> {
    let co = ca + cb;
    let mut out = vec![0.0f32; counts.len() * n * co];
    for (p, &k) in counts.iter().enumerate() {
        for r in 0..k {
            let i = p * n + r;
            out[i * co..i * co + ca].copy_from_slice(&a[i * ca..(i + 1) * ca]);
            out[i * co + ca..(i + 1) * co].copy_from_slice(&b[i * cb..(i + 1) * cb]);
        }
    }
    out
}

/// Linear + BN + ReLU on the real rows of each pillar.
fn dense_bn(x: &[f32], cin: usize, n: usize, counts: &[usize], w: &ModelWeights, lin: &str, bn: &str) -> Result<(Vec<f32>, usize), NeuralError> {
    let (wt, b) = (param(w, &format!("{lin}.weight"))?, param(w, &format!("{lin}.bias"))?);
    let (s, t) = (param(w, &format!("{bn}.scale"))?, param(w, &format!("{bn}.shift"))?);
    if wt.dim(1) != cin {
        return Err(NeuralError::Shape(format!("{lin} expects {} inputs, got {cin}", wt.dim(1))));
    }
    let co = wt.dim(0);
    let mut out = vec![0.0f32; counts.len() * n * co];
    out.par_chunks_mut((n * co).max(1)).enumerate().for_each(|(p, o)| {
        let k = counts[p];
        let y = linear_rows(&x[p * n * cin..(p * n + k) * cin], k, wt, b);
        o[..k * co].copy_from_slice(&y);
        bn_relu_rows(&mut o[..k * co], co, s, t);
    });
    Ok((out, co))
}

/// Encodes every pillar to one feature vector (P × pfn_out).
pub fn pillar_encoder_forward(pillars: &PillarSet, w: &ModelWeights) -> Result<DenseTensor, NeuralError> {
    let x = &pillars.features;
    if x.shape().len() != 3 || x.dim(2) != DECORATED_FEATURES {
        return Err(NeuralError::Shape(format!("pillar features must be P×N×{DECORATED_FEATURES}, got {:?}", x.shape())));
    }
    let (p, n) = (x.dim(0), x.dim(1));
    let counts = &pillars.point_counts;
    let centers = pillar_centers(pillars);

    let ta1 = triple_attention_forward(x, counts, &centers, &TaWeights::from_model(w, "encoder.ta1")?)?;
    let cat = concat(ta1.features.data(), 9, x.data(), 9, n, counts);
    let (h1, c1) = dense_bn(&cat, 18, n, counts, w, "encoder.fc1", "encoder.bn1")?;

    let h1t = DenseTensor::from_vec(&[p, n, c1], h1).expect("sized above");
    let ta2 = triple_attention_forward(&h1t, counts, &centers, &TaWeights::from_model(w, "encoder.ta2")?)?;
    let cat = concat(ta2.features.data(), c1, h1t.data(), c1, n, counts);
    let (h2, c2) = dense_bn(&cat, 2 * c1, n, counts, w, "encoder.fc2", "encoder.bn2")?;

    let (h3, c3) = dense_bn(&h2, c2, n, counts, w, "encoder.pfn1", "encoder.pfn1_bn")?;
    let pooled: Vec<Vec<f32>> = (0..p).map(|i| masked_max(&h3[i * n * c3..(i + 1) * n * c3], counts[i], c3)).collect();
    let mut cat = vec![0.0f32; p * n * 2 * c3];
    for i in 0..p {
        for r in 0..counts[i] {
            let j = i * n + r;
            cat[j * 2 * c3..j * 2 * c3 + c3].copy_from_slice(&h3[j * c3..(j + 1) * c3]);
            cat[j * 2 * c3 + c3..(j + 1) * 2 * c3].copy_from_slice(&pooled[i]);
        }
    }
    let (h4, c4) = dense_bn(&cat, 2 * c3, n, counts, w, "encoder.pfn2", "encoder.pfn2_bn")?;
    let mut out = Vec::with_capacity(p * c4);
    for i in 0..p {
        out.extend(masked_max(&h4[i * n * c4..(i + 1) * n * c4], counts[i], c4));
    }
    Ok(DenseTensor::from_vec(&[p, c4], out).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_weights, ArchitectureConfig};
    use crate::preprocess::{pillarize, PillarGridConfig};
    use crate::{Cloud, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> PillarGridConfig {
        PillarGridConfig {
            x_range: [0.0, 6.4],
            y_range: [0.0, 6.4],
            z_range: [-1.0, 3.0],
            pillar_size_x: 0.4,
            pillar_size_y: 0.4,
            max_points_per_pillar: 8,
            ..PillarGridConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> Cloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Point::new(rng.random_range(0.0..1.6), rng.random_range(0.0..1.2), rng.random_range(-0.5..2.0), rng.random_range(0.0..1.0)))
            .collect();
        Cloud::from_points(pts)
    }

    #[test]
    fn encoder_output_shape_and_order_invariance() {
        let w = init_weights(&ArchitectureConfig::small(), 9).unwrap();
        let c = cloud(60, 2);
        let set = pillarize(&c, &grid()).unwrap();
        let a = pillar_encoder_forward(&set, &w).unwrap();
        assert_eq!(a.shape(), &[set.len(), 32]);
        assert!(a.all_finite());
        assert!(a.data().iter().all(|&v| v >= 0.0));

        // Reverse real rows inside every pillar.
        let mut shuffled = set.clone();
        let (n, ch) = (set.features.dim(1), 9);
        let d = shuffled.features.data_mut();
        for (p, &k) in set.point_counts.iter().enumerate() {
            for r in 0..k {
                let (dst, src) = (p * n + r, p * n + k - 1 - r);
                d[dst * ch..(dst + 1) * ch].copy_from_slice(&set.features.data()[src * ch..(src + 1) * ch]);
            }
        }
        let b = pillar_encoder_forward(&shuffled, &w).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn centers_are_order_free() {
        let set = pillarize(&cloud(40, 5), &grid()).unwrap();
        let c = pillar_centers(&set);
        for (a, b) in c.iter().zip(set.centers()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
    }
}
