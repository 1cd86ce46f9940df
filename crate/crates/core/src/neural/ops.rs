//! Dense forward kernels on row-major `f32` slices.
//!
//! Accumulation order is fixed (bias first, then input channel, kernel row,
//! kernel column) so results are reproducible bit for bit.

use rayon::prelude::*;

use crate::neural::NeuralError;
use crate::tensor::DenseTensor;

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[r] = W · x[r] + b` for each of the `rows` input rows.
/// `w` is `out_dim × in_dim`.
pub fn linear_rows(x: &[f32], rows: usize, w: &DenseTensor, b: &DenseTensor) -> Vec<f32> {
    let (od, id) = (w.dim(0), w.dim(1));
    debug_assert_eq!(x.len(), rows * id);
    let (w, b) = (w.data(), b.data());
    let mut out = vec![0.0f32; rows * od];
    for r in 0..rows {
        let xi = &x[r * id..(r + 1) * id];
        let o = &mut out[r * od..(r + 1) * od];
        for (j, oj) in o.iter_mut().enumerate() {
            let wj = &w[j * id..(j + 1) * id];
            let mut acc = b[j];
            for (a, v) in wj.iter().zip(xi) {
                acc += a * v;
            }
            *oj = acc;
        }
    }
    out
}

/// Inference-mode batch norm (per-channel affine) followed by ReLU, on rows
/// of `c` channels.
pub fn bn_relu_rows(x: &mut [f32], c: usize, scale: &DenseTensor, shift: &DenseTensor) {
    let (s, t) = (scale.data(), shift.data());
    for row in x.chunks_mut(c) {
        for ((v, a), b) in row.iter_mut().zip(s).zip(t) {
            *v = (*v * a + b).max(0.0);
        }
    }
}

/// Per-channel affine + ReLU on a `C × H × W` map.
pub fn bn_relu_map(x: &mut DenseTensor, scale: &DenseTensor, shift: &DenseTensor) {
    let plane = x.dim(1) * x.dim(2);
    let (s, t) = (scale.data().to_vec(), shift.data().to_vec());
    x.data_mut().par_chunks_mut(plane).enumerate().for_each(|(c, p)| {
        for v in p {
            *v = (*v * s[c] + t[c]).max(0.0);
        }
    });
}

/// Element-wise max over the first `count` rows of a `rows × c` block.
pub fn masked_max(x: &[f32], count: usize, c: usize) -> Vec<f32> {
    let mut m = vec![f32::NEG_INFINITY; c];
    for row in x[..count * c].chunks(c) {
        for (a, &v) in m.iter_mut().zip(row) {
            if v > *a {
                *a = v;
            }
        }
    }
    if count == 0 {
        m.fill(0.0);
    }
    m
}

pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

const OC_BLOCK: usize = 4;
const TILE: usize = 8;

/// 2D cross-correlation with zero padding. `input` is `Cin × H × W`, `weight` is
/// `Cout × Cin × k × k`, `bias` has `Cout` entries.
pub fn conv2d(input: &DenseTensor, weight: &DenseTensor, bias: &DenseTensor, stride: usize, pad: usize) -> Result<DenseTensor, NeuralError> {
    let shape_err = |m: String| Err(NeuralError::Shape(m));
    if input.shape().len() != 3 || weight.shape().len() != 4 {
        return shape_err(format!("conv2d: input {:?}, weight {:?}", input.shape(), weight.shape()));
    }
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, wcin, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if wcin != cin || kh != kw || bias.len() != cout || stride == 0 {
        return shape_err(format!("conv2d: input {:?}, weight {:?}, bias {:?}", input.shape(), weight.shape(), bias.shape()));
    }
    let k = kh;
    let (Some(oh), Some(ow)) = (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) else {
        return shape_err(format!("conv2d: kernel {k} larger than padded input {h}×{w}"));
    };
    let x = input.data();
    let wt = weight.data();
    let bs = bias.data();
    let kk = cin * k * k;
    let owp = ow.div_ceil(TILE) * TILE;
    // Weights regrouped per block of OC_BLOCK output channels as [j][b].
    let nblk = cout.div_ceil(OC_BLOCK);
    let mut wblk = vec![0.0f32; nblk * kk * OC_BLOCK];
    for oc in 0..cout {
        let (blk, b) = (oc / OC_BLOCK, oc % OC_BLOCK);
        for j in 0..kk {
            wblk[(blk * kk + j) * OC_BLOCK + b] = wt[oc * kk + j];
        }
    }
    let geo = ConvGeometry { cin, h, w, k, stride, pad, ow, owp, kk, nblk, cout };
    let rows: Vec<Vec<f32>> = (0..oh).into_par_iter().map(|oy| conv_row_dispatch(&geo, x, &wblk, bs, oy)).collect();
    let mut out = vec![0.0f32; cout * oh * ow];
    for (oy, acc) in rows.iter().enumerate() {
        for oc in 0..cout {
            out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow].copy_from_slice(&acc[oc * owp..oc * owp + ow]);
        }
    }
    Ok(DenseTensor::from_vec(&[cout, oh, ow], out).expect("sized above"))
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ow: usize,
    owp: usize,
    kk: usize,
    nblk: usize,
    cout: usize,
}

fn conv_row_dispatch(g: &ConvGeometry, x: &[f32], wblk: &[f32], bs: &[f32], oy: usize) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { conv_row_avx2(g, x, wblk, bs, oy) };
    }
    conv_row(g, x, wblk, bs, oy)
}

/// Same code compiled with AVX2 enabled. No FMA, so results are identical to
/// the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_row_avx2(g: &ConvGeometry, x: &[f32], wblk: &[f32], bs: &[f32], oy: usize) -> Vec<f32> {
    conv_row(g, x, wblk, bs, oy)
}

/// One output row for every channel: gather the zero-padded receptive field
/// into a contiguous patch (kk × owp), then run a register-blocked kernel over
/// output-channel blocks and column tiles, summing in (ic, ky, kx) order.
#[inline(always)]
fn conv_row(g: &ConvGeometry, x: &[f32], wblk: &[f32], bs: &[f32], oy: usize) -> Vec<f32> {
    let &ConvGeometry { cin, h, w, k, stride, pad, ow, owp, kk, nblk, cout } = g;
    let _ = cout;
    let mut patch = vec![0.0f32; kk * owp];
    for ic in 0..cin {
        for ky in 0..k {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row = &x[(ic * h + iy as usize) * w..(ic * h + iy as usize + 1) * w];
            for kx in 0..k {
                let dst = &mut patch[((ic * k + ky) * k + kx) * owp..][..ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && (ix as usize) < w {
                        *d = row[ix as usize];
                    }
                }
            }
        }
    }
    let mut acc = vec![0.0f32; nblk * OC_BLOCK * owp];
    for blk in 0..nblk {
        let wb = &wblk[blk * kk * OC_BLOCK..(blk + 1) * kk * OC_BLOCK];
        for t0 in (0..owp).step_by(TILE) {
            let mut r = [[0.0f32; TILE]; OC_BLOCK];
            for (b, rb) in r.iter_mut().enumerate() {
                *rb = [bs.get(blk * OC_BLOCK + b).copied().unwrap_or(0.0); TILE];
            }
            for j in 0..kk {
                let wj: [f32; OC_BLOCK] = wb[j * OC_BLOCK..(j + 1) * OC_BLOCK].try_into().expect("block");
                let pt: [f32; TILE] = patch[j * owp + t0..j * owp + t0 + TILE].try_into().expect("tile");
                for b in 0..OC_BLOCK {
                    for t in 0..TILE {
                        r[b][t] += wj[b] * pt[t];
                    }
                }
            }
            for (b, rb) in r.iter().enumerate() {
                acc[(blk * OC_BLOCK + b) * owp + t0..][..TILE].copy_from_slice(rb);
            }
        }
    }
    acc
}

/// Transposed convolution without padding: output size `(H − 1)·s + k`.
/// `weight` is `Cin × Cout × k × k`. Contributions to each output are summed
/// in input-channel, then input-row, then input-column order.
pub fn deconv2d(input: &DenseTensor, weight: &DenseTensor, bias: &DenseTensor, stride: usize) -> Result<DenseTensor, NeuralError> {
    if input.shape().len() != 3 || weight.shape().len() != 4 {
        return Err(NeuralError::Shape(format!("deconv2d: input {:?}, weight {:?}", input.shape(), weight.shape())));
    }
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (wcin, cout, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if wcin != cin || kh != kw || bias.len() != cout || stride == 0 || h == 0 || w == 0 {
        return Err(NeuralError::Shape(format!("deconv2d: input {:?}, weight {:?}, bias {:?}", input.shape(), weight.shape(), bias.shape())));
    }
    let k = kh;
    let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
    let x = input.data();
    let wt = weight.data();
    let bs = bias.data();
    if k <= stride {
        // Each output gets at most one term per input channel, so every
        // kernel tap is a 1×1 convolution whose result lands on a strided
        // sub-grid of the output.
        let mut out = DenseTensor::zeros(&[cout, oh, ow]);
        {
            let o = out.data_mut();
            for (oc, plane) in o.chunks_mut(oh * ow).enumerate() {
                plane.fill(bias.data()[oc]);
            }
        }
        for ky in 0..k {
            for kx in 0..k {
                let mut tap = vec![0.0f32; cout * cin];
                for oc in 0..cout {
                    for ic in 0..cin {
                        tap[oc * cin + ic] = wt[((ic * cout + oc) * k + ky) * k + kx];
                    }
                }
                let tap = DenseTensor::from_vec(&[cout, cin, 1, 1], tap).expect("sized above");
                let y = conv2d(input, &tap, bias, 1, 0)?;
                let (yd, o) = (y.data(), out.data_mut());
                for oc in 0..cout {
                    for iy in 0..h {
                        let src = &yd[(oc * h + iy) * w..(oc * h + iy + 1) * w];
                        let orow = &mut o[(oc * oh + iy * stride + ky) * ow..(oc * oh + iy * stride + ky + 1) * ow];
                        for (ix, &v) in src.iter().enumerate() {
                            orow[ix * stride + kx] = v;
                        }
                    }
                }
            }
        }
        return Ok(out);
    }
    let mut out = vec![0.0f32; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, o)| {
        o.fill(bs[oc]);
        for ic in 0..cin {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            // gather: rising input row ⇔ falling kernel row
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = o[oy * ow + ox];
                    for ky in (0..k).rev() {
                        if oy < ky || (oy - ky) % stride != 0 || (oy - ky) / stride >= h {
                            continue;
                        }
                        let iy = (oy - ky) / stride;
                        for kx in (0..k).rev() {
                            if ox < kx || (ox - kx) % stride != 0 || (ox - kx) / stride >= w {
                                continue;
                            }
                            let ix = (ox - kx) / stride;
                            acc += xin[iy * w + ix] * wt[((ic * cout + oc) * k + ky) * k + kx];
                        }
                    }
                    o[oy * ow + ox] = acc;
                }
            }
        }
    });
    Ok(DenseTensor::from_vec(&[cout, oh, ow], out).expect("sized above"))
}
