use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::{EncoderLayer, LayerNorm, ViTModel};
use crate::error::{Error, Result};
use crate::layout::patch_matrix;
use crate::tensorio::ImageTensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `(N + 1) × D` token matrix; row 0 is the class token.
pub type TokenSequence = Array2<f64>;

/// `z₀ = [x_class; x¹E; …; xᴺE] + E_pos`.
///
/// Works for plain and encrypted images alike; the image is cut into the
/// model's `p × p` patches using the shared flattening order.
pub fn embed(model: &ViTModel, img: &ImageTensor) -> Result<TokenSequence> {
    let hp = model.hyperparams();
    if img.channels() != hp.channels {
        return Err(Error::dim(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            hp.channels
        )));
    }
    let patches = patch_matrix(img, hp.block_size)?;
    if patches.nrows() != hp.num_patches {
        return Err(Error::dim(format!(
            "image yields {} patches, model expects N = {}",
            patches.nrows(),
            hp.num_patches
        )));
    }
    let mut z = Array2::zeros((hp.num_patches + 1, hp.dim));
    z.row_mut(0).assign(&model.class_token);
    z.slice_mut(s![1.., ..])
        .assign(&patches.dot(&model.patch_embed));
    z += &model.pos_embed;
    Ok(z)
}

/// Row-wise layer norm. A zero row maps to `shift`.
pub fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&ln.scale).zip(&ln.shift) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn attention(x: &Array2<f64>, layer: &EncoderLayer, heads: usize) -> Array2<f64> {
    let d = x.ncols();
    let dh = d / heads;
    let q = x.dot(&layer.wq);
    let k = x.dot(&layer.wk);
    let v = x.dot(&layer.wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros((x.nrows(), d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    concat.dot(&layer.wo)
}

fn mlp(x: &Array2<f64>, layer: &EncoderLayer) -> Array2<f64> {
    let mut hidden = x.dot(&layer.mlp_w1) + &layer.mlp_b1;
    hidden.mapv_inplace(gelu);
    hidden.dot(&layer.mlp_w2) + &layer.mlp_b2
}

/// Pre-norm encoder: per layer `z += MHSA(LN(z))`, then `z += MLP(LN(z))`.
pub fn encoder_forward(model: &ViTModel, z: &TokenSequence) -> Result<TokenSequence> {
    let hp = model.hyperparams();
    if z.dim() != (hp.num_patches + 1, hp.dim) {
        return Err(Error::dim(format!(
            "token sequence is {:?}, expected ({}, {})",
            z.dim(),
            hp.num_patches + 1,
            hp.dim
        )));
    }
    let mut z = z.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        z += &attention(&layer_norm(&z, &layer.ln1), layer, hp.heads);
        z += &mlp(&layer_norm(&z, &layer.ln2), layer);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {i} output")));
        }
    }
    Ok(z)
}

/// Encoder output at the class-token slot.
pub fn features(model: &ViTModel, img: &ImageTensor) -> Result<Array1<f64>> {
    let z = encoder_forward(model, &embed(model, img)?)?;
    Ok(z.row(0).to_owned())
}

pub(crate) fn head_logits(model: &ViTModel, feats: ArrayView1<f64>) -> Array1<f64> {
    feats.dot(&model.head.weight) + &model.head.bias
}

pub fn classify(model: &ViTModel, img: &ImageTensor) -> Result<Array1<f64>> {
    Ok(head_logits(model, features(model, img)?.view()))
}

/// Logits for a batch, one row per image, computed in parallel.
pub fn classify_batch(model: &ViTModel, images: &[ImageTensor]) -> Result<Array2<f64>> {
    let rows = images
        .par_iter()
        .map(|img| classify(model, img))
        .collect::<Result<Vec<_>>>()?;
    let k = model.hyperparams().num_classes;
    let mut out = Array2::zeros((images.len(), k));
    for (mut dst, row) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&row);
    }
    Ok(out)
}
