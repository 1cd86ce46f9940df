//! Triple attention over a batch of pillars.
//!
//! Per pillar with real rows `V` (n × C):
//! point score `S` from a small MLP on each row's channel max, channel score
//! `T` from an MLP on the masked max over rows, `F1 = sigmoid(S Tᵀ) ⊙ V`,
//! then a pillar gate `Q` from the masked max of `F1` concatenated with the
//! pillar center, and `F2 = Q · F1`. Pad rows stay zero and never enter a pool.

use rayon::prelude::*;

use super::ops::{linear_rows, masked_max, sigmoid};
use super::{param, NeuralError};
use crate::io::ModelWeights;
use crate::tensor::DenseTensor;

/// Borrowed parameters of one triple-attention block.
#[derive(Debug, Clone, Copy)]
pub struct TaWeights<'a> {
    pub point_fc1: (&'a DenseTensor, &'a DenseTensor),
    pub point_fc2: (&'a DenseTensor, &'a DenseTensor),
    pub channel_fc1: (&'a DenseTensor, &'a DenseTensor),
    pub channel_fc2: (&'a DenseTensor, &'a DenseTensor),
    pub voxel_fc1: (&'a DenseTensor, &'a DenseTensor),
    pub voxel_fc2: (&'a DenseTensor, &'a DenseTensor),
}

impl<'a> TaWeights<'a> {
    pub fn from_model(w: &'a ModelWeights, prefix: &str) -> Result<Self, NeuralError> {
        let lin = |n: &str| -> Result<_, NeuralError> {
            Ok((param(w, &format!("{prefix}.{n}.weight"))?, param(w, &format!("{prefix}.{n}.bias"))?))
        };
        Ok(Self {
            point_fc1: lin("point_fc1")?,
            point_fc2: lin("point_fc2")?,
            channel_fc1: lin("channel_fc1")?,
            channel_fc2: lin("channel_fc2")?,
            voxel_fc1: lin("voxel_fc1")?,
            voxel_fc2: lin("voxel_fc2")?,
        })
    }

    /// Channel count the block was built for.
    pub fn channels(&self) -> usize {
        self.channel_fc1.0.dim(1)
    }
}

#[derive(Debug, Clone)]
pub struct TaOutput {
    /// P × N × C, zero on pad rows.
    pub features: DenseTensor,
    /// Pillar gate `Q` per pillar, in (0, 1).
    pub voxel_gate: Vec<f32>,
}

fn relu(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

fn mlp(x: &[f32], rows: usize, l1: (&DenseTensor, &DenseTensor), l2: (&DenseTensor, &DenseTensor)) -> Vec<f32> {
    let mut h = linear_rows(x, rows, l1.0, l1.1);
    relu(&mut h);
    linear_rows(&h, rows, l2.0, l2.1)
}

/// Attention on the `count` real rows of one pillar; writes into `out`.
fn pillar(x: &[f32], count: usize, c: usize, center: [f32; 3], w: &TaWeights, out: &mut [f32]) -> f32 {
    if count == 0 {
        return sigmoid(0.0);
    }
    let x = &x[..count * c];
    let row_max: Vec<f32> = x.chunks(c).map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max)).collect();
    let s = mlp(&row_max, count, w.point_fc1, w.point_fc2);
    let t = mlp(&masked_max(x, count, c), 1, w.channel_fc1, w.channel_fc2);
    let f1 = &mut out[..count * c];
    for (r, (orow, xrow)) in f1.chunks_mut(c).zip(x.chunks(c)).enumerate() {
        for ((o, &v), &tc) in orow.iter_mut().zip(xrow).zip(&t) {
            *o = sigmoid(s[r] * tc) * v;
        }
    }
    let mut pooled = masked_max(f1, count, c);
    pooled.extend_from_slice(&center);
    let q = sigmoid(mlp(&pooled, 1, w.voxel_fc1, w.voxel_fc2)[0]);
    for v in f1.iter_mut() {
        *v *= q;
    }
    q
}

/// Runs one block on `x` (P × N × C). `counts[p]` is the number of real rows
/// of pillar `p` and `centers[p]` its mean point.
pub fn triple_attention_forward(x: &DenseTensor, counts: &[usize], centers: &[[f32; 3]], w: &TaWeights) -> Result<TaOutput, NeuralError> {
    if x.shape().len() != 3 {
        return Err(NeuralError::Shape(format!("attention input must be P×N×C, got {:?}", x.shape())));
    }
    let (p, n, c) = (x.dim(0), x.dim(1), x.dim(2));
    if counts.len() != p || centers.len() != p {
        return Err(NeuralError::Shape(format!("{p} pillars but {} counts and {} centers", counts.len(), centers.len())));
    }
    if w.channels() != c {
        return Err(NeuralError::Shape(format!("attention block expects {} channels, got {c}", w.channels())));
    }
    if let Some(&bad) = counts.iter().find(|&&k| k > n) {
        return Err(NeuralError::Shape(format!("count {bad} exceeds {n} rows")));
    }
    let mut out = vec![0.0f32; p * n * c];
    let src = x.data();
    let gate: Vec<f32> = out
        .par_chunks_mut((n * c).max(1))
        .enumerate()
        .map(|(i, o)| pillar(&src[i * n * c..(i + 1) * n * c], counts[i], c, centers[i], w, o))
        .collect();
    Ok(TaOutput { features: DenseTensor::from_vec(&[p, n, c], out).expect("sized above"), voxel_gate: gate })
}
