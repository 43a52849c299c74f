use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Axis, Zip};

use super::forward::{rel_index, ForwardPass, LayerCache, NormCache};
use super::params::{EncoderLayer, LayerNorm, Linear};
use super::{ModelConfig, Parameters};
use crate::error::{shape_mismatch, Result};

/// Accumulates weight and bias gradients of `y = x W + b`; returns `dL/dx`.
fn linear_backward(x: &Array2<f64>, dy: &Array2<f64>, lin: &Linear, grad: &mut Linear) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    norm: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &norm.gain;
    for ((mut row, xhat), inv) in dx
        .outer_iter_mut()
        .zip(cache.normalized.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let mean = row.sum() / d;
        let mean_proj = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = inv * (*g - mean - xh * mean_proj));
    }
    dx
}

fn relu_backward(dy: Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy;
    Zip::from(&mut dx).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

fn encoder_layer_backward(
    d_out: &Array2<f64>,
    cache: &LayerCache,
    layer: &EncoderLayer,
    grad: &mut EncoderLayer,
    cfg: &ModelConfig,
) -> Array2<f64> {
    // Feed-forward block.
    let d_res2 = layer_norm_backward(d_out, &cache.ffn_norm, &layer.ffn_norm, &mut grad.ffn_norm);
    let d_act = linear_backward(&cache.ffn_act, &d_res2, &layer.ffn_out, &mut grad.ffn_out);
    let d_pre = relu_backward(d_act, &cache.ffn_pre);
    let mut d_mid = linear_backward(&cache.mid, &d_pre, &layer.ffn_in, &mut grad.ffn_in);
    d_mid += &d_res2;

    // Attention block.
    let d_res1 = layer_norm_backward(&d_mid, &cache.attn_norm, &layer.attn_norm, &mut grad.attn_norm);
    let d_context = linear_backward(&cache.context, &d_res1, &layer.output, &mut grad.output);

    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dkey = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (head, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., head * dk..(head + 1) * dk];
        let d_ctx = d_context.slice(cols);
        let d_probs = d_ctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx));
        // Softmax Jacobian, row by row.
        let mut d_logits = d_probs;
        for (mut row, p) in d_logits.outer_iter_mut().zip(probs.outer_iter()) {
            let dot = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum::<f64>();
            Zip::from(&mut row).and(&p).for_each(|g, &pv| *g = pv * (*g - dot));
        }
        let mut bias_grad = grad.rel_bias.row_mut(head);
        for ((i, j), g) in d_logits.indexed_iter() {
            bias_grad[rel_index(i, j, cfg.rel_pos_clip)] += g;
        }
        dq.slice_mut(cols)
            .assign(&(d_logits.dot(&cache.k.slice(cols)) * scale));
        dkey.slice_mut(cols)
            .assign(&(d_logits.t().dot(&cache.q.slice(cols)) * scale));
    }
    let mut d_in = d_res1;
    d_in += &linear_backward(&cache.input, &dq, &layer.query, &mut grad.query);
    d_in += &linear_backward(&cache.input, &dkey, &layer.key, &mut grad.key);
    d_in += &linear_backward(&cache.input, &dv, &layer.value, &mut grad.value);
    d_in
}

/// Gradients of a scalar loss with respect to all parameters.
///
/// `d_masks` is `dL/dM` (shape `S x T x F`); `d_hidden[i]`, when present, is
/// an extra `dL/dh_i` injected by hidden-map losses.
pub fn backward(
    params: &Parameters,
    pass: &ForwardPass,
    d_masks: &Array3<f64>,
    d_hidden: &[Option<Array2<f64>>],
) -> Result<Parameters> {
    let cfg = &params.config;
    let masks = pass.masks.masks();
    if d_masks.dim() != masks.dim() {
        return Err(shape_mismatch("backward mask gradient", masks.dim(), d_masks.dim()));
    }
    if d_hidden.len() > pass.trace.len() {
        return Err(shape_mismatch("backward hidden gradients", pass.trace.len(), d_hidden.len()));
    }
    let mut grad = params.zeros_like();
    let frames = masks.dim().1;
    let bins = cfg.freq_bins;

    // Mask head: dL/dz = dL/dM * M (1 - M), laid out as T x (S F).
    let mut d_logits = Array2::zeros((frames, cfg.num_outputs * bins));
    for s in 0..cfg.num_outputs {
        let m = masks.index_axis(Axis(0), s);
        let dm = d_masks.index_axis(Axis(0), s);
        Zip::from(d_logits.slice_mut(s![.., s * bins..(s + 1) * bins]))
            .and(&m)
            .and(&dm)
            .for_each(|z, &mv, &g| *z = g * mv * (1.0 - mv));
    }
    let last = pass.trace.last();
    let mut d_h = linear_backward(last, &d_logits, &params.mask_head, &mut grad.mask_head);

    for i in (0..=params.layers.len()).rev() {
        if let Some(Some(extra)) = d_hidden.get(i) {
            if extra.dim() != d_h.dim() {
                return Err(shape_mismatch("hidden gradient", d_h.dim(), extra.dim()));
            }
            d_h += extra;
        }
        if i == 0 {
            break;
        }
        d_h = encoder_layer_backward(
            &d_h,
            &pass.layers[i - 1],
            &params.layers[i - 1],
            &mut grad.layers[i - 1],
            cfg,
        );
    }

    let d_pre = relu_backward(d_h, &pass.input_pre);
    linear_backward(&pass.features, &d_pre, &params.input, &mut grad.input);
    Ok(grad)
}
