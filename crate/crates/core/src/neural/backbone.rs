//! Three-level backbone with top-down fusion and attentive addition of the
//! upsampled branches. Output resolution is half the pseudo image.

use super::ops::{bn_relu_map, conv2d, deconv2d};
use super::{param, NeuralError};
use crate::io::ModelWeights;
use crate::tensor::DenseTensor;

fn conv_bn(x: &DenseTensor, w: &ModelWeights, name: &str, stride: usize) -> Result<DenseTensor, NeuralError> {
    let mut y = conv2d(x, param(w, &format!("{name}.weight"))?, param(w, &format!("{name}.bias"))?, stride, 1)?;
    bn_relu_map(&mut y, param(w, &format!("{name}_bn.scale"))?, param(w, &format!("{name}_bn.shift"))?);
    Ok(y)
}

fn deconv_bn(x: &DenseTensor, w: &ModelWeights, name: &str) -> Result<DenseTensor, NeuralError> {
    let wt = param(w, &format!("{name}.weight"))?;
    let k = wt.dim(2);
    let mut y = deconv2d(x, wt, param(w, &format!("{name}.bias"))?, k)?;
    bn_relu_map(&mut y, param(w, &format!("{name}_bn.scale"))?, param(w, &format!("{name}_bn.shift"))?);
    Ok(y)
}

fn add_into(a: &mut DenseTensor, b: &DenseTensor) -> Result<(), NeuralError> {
    if a.shape() != b.shape() {
        return Err(NeuralError::Shape(format!("cannot add {:?} and {:?}", a.shape(), b.shape())));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Softmax weights over the maps at every `(c, y, x)`. Each map's logits come
/// from its own 1×1 convolution.
pub fn attentive_addition_weights(maps: &[DenseTensor], convs: &[(&DenseTensor, &DenseTensor)]) -> Result<Vec<DenseTensor>, NeuralError> {
    if maps.is_empty() || maps.len() != convs.len() {
        return Err(NeuralError::Shape(format!("{} maps for {} attention convs", maps.len(), convs.len())));
    }
    if maps.iter().any(|m| m.shape() != maps[0].shape()) {
        return Err(NeuralError::Shape("attentive addition needs equal map shapes".into()));
    }
    let mut logits = maps.iter().zip(convs).map(|(m, (w, b))| conv2d(m, w, b, 1, 0)).collect::<Result<Vec<_>, _>>()?;
    if logits[0].shape() != maps[0].shape() {
        return Err(NeuralError::Shape(format!("attention conv changes shape to {:?}", logits[0].shape())));
    }
    let len = logits[0].len();
    for i in 0..len {
        let m = logits.iter().map(|l| l.data()[i]).fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for l in logits.iter_mut() {
            let e = (l.data()[i] - m).exp();
            l.data_mut()[i] = e;
            z += e;
        }
        for l in logits.iter_mut() {
            l.data_mut()[i] /= z;
        }
    }
    Ok(logits)
}

/// `Σ_i softmax_i ⊙ map_i`.
pub fn attentive_addition(maps: &[DenseTensor], convs: &[(&DenseTensor, &DenseTensor)]) -> Result<DenseTensor, NeuralError> {
    let weights = attentive_addition_weights(maps, convs)?;
    let mut out = DenseTensor::zeros(maps[0].shape());
    for (m, a) in maps.iter().zip(&weights) {
        for ((o, &v), &s) in out.data_mut().iter_mut().zip(m.data()).zip(a.data()) {
            *o += s * v;
        }
    }
    Ok(out)
}

/// Pseudo image (C × H × W, H and W divisible by 8) to fused features
/// (fused_channels × H/2 × W/2).
pub fn backbone_forward(image: &DenseTensor, w: &ModelWeights) -> Result<DenseTensor, NeuralError> {
    if image.shape().len() != 3 {
        return Err(NeuralError::Shape(format!("pseudo image must be C×H×W, got {:?}", image.shape())));
    }
    let (h, wd) = (image.dim(1), image.dim(2));
    if h % 8 != 0 || wd % 8 != 0 || h == 0 || wd == 0 {
        return Err(NeuralError::Indivisible { height: h, width: wd });
    }
    let mut levels = Vec::with_capacity(3);
    let mut x = image.clone();
    for g in 0..3 {
        x = conv_bn(&x, w, &format!("backbone.group{g}.conv0"), 2)?;
        x = conv_bn(&x, w, &format!("backbone.group{g}.conv1"), 1)?;
        x = conv_bn(&x, w, &format!("backbone.group{g}.conv2"), 1)?;
        levels.push(x.clone());
    }
    let b3 = levels.pop().expect("three levels");
    let mut b2 = levels.pop().expect("three levels");
    let mut b1 = levels.pop().expect("three levels");
    add_into(&mut b2, &deconv_bn(&b3, w, "backbone.up2")?)?;
    add_into(&mut b1, &deconv_bn(&b2, w, "backbone.up1")?)?;

    let maps = [deconv_bn(&b1, w, "backbone.final0")?, deconv_bn(&b2, w, "backbone.final1")?, deconv_bn(&b3, w, "backbone.final2")?];
    let convs = (0..3)
        .map(|g| Ok((param(w, &format!("backbone.attn{g}.weight"))?, param(w, &format!("backbone.attn{g}.bias"))?)))
        .collect::<Result<Vec<_>, NeuralError>>()?;
    attentive_addition(&maps, &convs)
}
