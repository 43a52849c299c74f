use ndarray::{s, Array1, Array2, Array3, Axis};

use super::params::{EncoderLayer, LayerNorm};
use super::{LayerTrace, ModelConfig, Parameters};
use crate::error::{shape_mismatch, Error, Result};
use crate::signal::MaskSet;

pub(crate) const NORM_EPS: f64 = 1e-5;
/// Masks are kept this far inside the open unit interval.
const MASK_MARGIN: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct NormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, norm: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + NORM_EPS).sqrt();
        let scale = *inv;
        row.mapv_inplace(|v| v * scale);
    }
    let out = &normalized * &norm.gain + &norm.bias;
    (out, NormCache { normalized, inv_std })
}

/// Index into a relative-bias table for query frame `i` and key frame `j`.
pub(crate) fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let rel = (j as isize - i as isize).clamp(-(clip as isize), clip as isize);
    (rel + clip as isize) as usize
}

fn check_finite(x: &Array2<f64>, stage: &'static str, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { stage, layer })
    }
}

/// `h_0 = ReLU(features W + b)`.
pub fn project_input(features: &Array2<f64>, params: &Parameters) -> Result<Array2<f64>> {
    Ok(project_input_cached(features, params)?.1)
}

fn project_input_cached(
    features: &Array2<f64>,
    params: &Parameters,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if features.ncols() != params.config.freq_bins || features.nrows() == 0 {
        return Err(shape_mismatch(
            "project_input",
            ("T >= 1", params.config.freq_bins),
            features.dim(),
        ));
    }
    let pre = params.input.apply(features);
    let h0 = pre.mapv(|v| v.max(0.0));
    check_finite(&h0, "input projection", 0)?;
    Ok((pre, h0))
}

pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities per head, `T x T`.
    pub probs: Vec<Array2<f64>>,
    pub context: Array2<f64>,
    pub attn_norm: NormCache,
    pub mid: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub ffn_norm: NormCache,
}

fn head_logits(
    q: &Array2<f64>,
    k: &Array2<f64>,
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    head: usize,
) -> Array2<f64> {
    let dk = cfg.head_dim();
    let cols = s![.., head * dk..(head + 1) * dk];
    let scale = 1.0 / (dk as f64).sqrt();
    let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
    let bias = layer.rel_bias.row(head);
    for ((i, j), v) in logits.indexed_iter_mut() {
        *v += bias[rel_index(i, j, cfg.rel_pos_clip)];
    }
    logits
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-softmax attention logits of every head, including relative biases.
pub fn attention_logits(
    h_prev: &Array2<f64>,
    layer: &EncoderLayer,
    cfg: &ModelConfig,
) -> Vec<Array2<f64>> {
    let q = layer.query.apply(h_prev);
    let k = layer.key.apply(h_prev);
    (0..cfg.num_heads)
        .map(|h| head_logits(&q, &k, layer, cfg, h))
        .collect()
}

pub(crate) fn encoder_layer_cached(
    h_prev: &Array2<f64>,
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    index: usize,
) -> Result<(Array2<f64>, LayerCache)> {
    if h_prev.ncols() != cfg.attn_dim {
        return Err(shape_mismatch("encoder_layer", cfg.attn_dim, h_prev.ncols()));
    }
    let dk = cfg.head_dim();
    let q = layer.query.apply(h_prev);
    let k = layer.key.apply(h_prev);
    let v = layer.value.apply(h_prev);
    let mut context = Array2::zeros(h_prev.raw_dim());
    let mut probs = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let mut p = head_logits(&q, &k, layer, cfg, head);
        softmax_rows(&mut p);
        let cols = s![.., head * dk..(head + 1) * dk];
        context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let attended = layer.output.apply(&context);
    let (mid, attn_norm) = layer_norm(&(h_prev + &attended), &layer.attn_norm);
    check_finite(&mid, "attention block", index)?;

    let ffn_pre = layer.ffn_in.apply(&mid);
    let ffn_act = ffn_pre.mapv(|x| x.max(0.0));
    let ffn_out = layer.ffn_out.apply(&ffn_act);
    let (out, ffn_norm) = layer_norm(&(&mid + &ffn_out), &layer.ffn_norm);
    check_finite(&out, "feed-forward block", index)?;

    Ok((
        out,
        LayerCache {
            input: h_prev.clone(),
            q,
            k,
            v,
            probs,
            context,
            attn_norm,
            mid,
            ffn_pre,
            ffn_act,
            ffn_norm,
        },
    ))
}

/// One encoder layer:
/// `h' = LN(h + MHA(h))`, `h_i = LN(h' + FFN(h'))`.
///
/// `index` is the 1-based layer number reported in numeric errors.
pub fn encoder_layer(
    h_prev: &Array2<f64>,
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    index: usize,
) -> Result<Array2<f64>> {
    Ok(encoder_layer_cached(h_prev, layer, cfg, index)?.0)
}

/// `sigmoid(h_I W + b)` reshaped to `S x T x F`.
pub fn estimate_masks(h_last: &Array2<f64>, params: &Parameters) -> Result<MaskSet> {
    let cfg = &params.config;
    if h_last.ncols() != cfg.attn_dim {
        return Err(shape_mismatch("estimate_masks", cfg.attn_dim, h_last.ncols()));
    }
    let logits = params.mask_head.apply(h_last);
    let frames = h_last.nrows();
    let bins = cfg.freq_bins;
    let mut masks = Array3::zeros((cfg.num_outputs, frames, bins));
    for s in 0..cfg.num_outputs {
        let block = logits.slice(s![.., s * bins..(s + 1) * bins]);
        masks
            .index_axis_mut(Axis(0), s)
            .assign(&block.mapv(|z| sigmoid(z).clamp(MASK_MARGIN, 1.0 - MASK_MARGIN)));
    }
    if masks.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric {
            stage: "mask estimator",
            layer: cfg.num_layers,
        });
    }
    Ok(MaskSet::from_raw(masks))
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass {
    pub masks: MaskSet,
    pub trace: LayerTrace,
    pub(crate) features: Array2<f64>,
    pub(crate) input_pre: Array2<f64>,
    pub(crate) layers: Vec<LayerCache>,
}

/// Forward pass retaining intermediate activations for [`super::backward`].
pub fn forward_train(params: &Parameters, features: &Array2<f64>) -> Result<ForwardPass> {
    let (input_pre, h0) = project_input_cached(features, params)?;
    let mut hidden = vec![h0];
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (h, cache) = encoder_layer_cached(hidden.last().unwrap(), layer, &params.config, i + 1)?;
        hidden.push(h);
        layers.push(cache);
    }
    let masks = estimate_masks(hidden.last().unwrap(), params)?;
    Ok(ForwardPass {
        masks,
        trace: LayerTrace::new(hidden),
        features: features.clone(),
        input_pre,
        layers,
    })
}

/// Masks and the full hidden-map trace for a `T x F` feature matrix.
pub fn forward(params: &Parameters, features: &Array2<f64>) -> Result<(MaskSet, LayerTrace)> {
    let mut h = project_input(features, params)?;
    let mut hidden = Vec::with_capacity(params.layers.len() + 1);
    for (i, layer) in params.layers.iter().enumerate() {
        let next = encoder_layer(&h, layer, &params.config, i + 1)?;
        hidden.push(std::mem::replace(&mut h, next));
    }
    let masks = estimate_masks(&h, params)?;
    hidden.push(h);
    Ok((masks, LayerTrace::new(hidden)))
}
