use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;

/// A collection of named, trainable tensors.
///
/// Tensor order is fixed per type, which is what optimizer state, gradient
/// reduction and checkpoints rely on.
pub trait TensorSet {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let theirs = other.tensors();
        for ((_, mut mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            Zip::from(&mut mine).and(&t).for_each(|a, &b| *a += scale * b);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Affine map `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn fan_in_uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }
}

/// One post-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Additive attention-logit bias per head, indexed by clipped relative
    /// distance `j - i + clip`. Shape `heads x (2 * clip + 1)`.
    pub rel_bias: Array2<f64>,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.attn_dim;
        Self {
            query: Linear::fan_in_uniform(d, d, rng),
            key: Linear::fan_in_uniform(d, d, rng),
            value: Linear::fan_in_uniform(d, d, rng),
            output: Linear::fan_in_uniform(d, d, rng),
            rel_bias: Array2::zeros((cfg.num_heads, 2 * cfg.rel_pos_clip + 1)),
            attn_norm: LayerNorm::new(d),
            ffn_in: Linear::fan_in_uniform(d, cfg.ffn_dim, rng),
            ffn_out: Linear::fan_in_uniform(cfg.ffn_dim, d, rng),
            ffn_norm: LayerNorm::new(d),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.attn_dim;
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            rel_bias: Array2::zeros((cfg.num_heads, 2 * cfg.rel_pos_clip + 1)),
            attn_norm: LayerNorm::zeros(d),
            ffn_in: Linear::zeros(d, cfg.ffn_dim),
            ffn_out: Linear::zeros(cfg.ffn_dim, d),
            ffn_norm: LayerNorm::zeros(d),
        }
    }
}

/// All trainable weights of a mask estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub mask_head: Linear,
}

impl Parameters {
    /// Deterministic fan-in uniform initialization; biases zero, norms identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Linear::fan_in_uniform(cfg.freq_bins, cfg.attn_dim, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer::init(cfg, &mut rng))
            .collect();
        let mask_head =
            Linear::fan_in_uniform(cfg.attn_dim, cfg.num_outputs * cfg.freq_bins, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            input,
            layers,
            mask_head,
        })
    }

    /// Same shapes as `self`, every entry zero (including norm gains).
    pub fn zeros_like(&self) -> Self {
        let cfg = &self.config;
        Self {
            config: cfg.clone(),
            input: Linear::zeros(cfg.freq_bins, cfg.attn_dim),
            layers: (0..cfg.num_layers).map(|_| EncoderLayer::zeros(cfg)).collect(),
            mask_head: Linear::zeros(cfg.attn_dim, cfg.num_outputs * cfg.freq_bins),
        }
    }
}

impl TensorSet for Parameters {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.input.push_tensors("input", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            layer.query.push_tensors(&format!("{p}.query"), &mut out);
            layer.key.push_tensors(&format!("{p}.key"), &mut out);
            layer.value.push_tensors(&format!("{p}.value"), &mut out);
            layer.output.push_tensors(&format!("{p}.output"), &mut out);
            out.push((format!("{p}.rel_bias"), layer.rel_bias.view().into_dyn()));
            out.push((format!("{p}.attn_norm.gain"), layer.attn_norm.gain.view().into_dyn()));
            out.push((format!("{p}.attn_norm.bias"), layer.attn_norm.bias.view().into_dyn()));
            layer.ffn_in.push_tensors(&format!("{p}.ffn_in"), &mut out);
            layer.ffn_out.push_tensors(&format!("{p}.ffn_out"), &mut out);
            out.push((format!("{p}.ffn_norm.gain"), layer.ffn_norm.gain.view().into_dyn()));
            out.push((format!("{p}.ffn_norm.bias"), layer.ffn_norm.bias.view().into_dyn()));
        }
        self.mask_head.push_tensors("mask_head", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.input.push_tensors_mut("input", &mut out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            layer.query.push_tensors_mut(&format!("{p}.query"), &mut out);
            layer.key.push_tensors_mut(&format!("{p}.key"), &mut out);
            layer.value.push_tensors_mut(&format!("{p}.value"), &mut out);
            layer.output.push_tensors_mut(&format!("{p}.output"), &mut out);
            out.push((format!("{p}.rel_bias"), layer.rel_bias.view_mut().into_dyn()));
            out.push((format!("{p}.attn_norm.gain"), layer.attn_norm.gain.view_mut().into_dyn()));
            out.push((format!("{p}.attn_norm.bias"), layer.attn_norm.bias.view_mut().into_dyn()));
            layer.ffn_in.push_tensors_mut(&format!("{p}.ffn_in"), &mut out);
            layer.ffn_out.push_tensors_mut(&format!("{p}.ffn_out"), &mut out);
            out.push((format!("{p}.ffn_norm.gain"), layer.ffn_norm.gain.view_mut().into_dyn()));
            out.push((format!("{p}.ffn_norm.bias"), layer.ffn_norm.bias.view_mut().into_dyn()));
        }
        self.mask_head.push_tensors_mut("mask_head", &mut out);
        out
    }
}
