//! Transformer mask estimator shared by teacher and student.
//!
//! Input magnitudes are projected to `h_0`, passed through post-norm encoder
//! layers with relative-position attention biases, and mapped to sigmoid
//! masks. Every hidden map `h_0 ..= h_I` is kept in a [`LayerTrace`] so it can
//! be matched during distillation.

mod backward;
mod checkpoint;
mod forward;
mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::backward;
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use forward::{
    attention_logits, encoder_layer, estimate_masks, forward, forward_train, project_input,
    ForwardPass,
};
pub use params::{EncoderLayer, LayerNorm, Linear, Parameters, TensorSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_outputs: usize,
    /// Relative distances beyond this many frames share one bias.
    pub rel_pos_clip: usize,
    pub freq_bins: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.num_outputs == 0 {
            return Err(Error::Config("num_outputs must be at least 1".into()));
        }
        if self.num_heads == 0 || self.attn_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} must be a positive multiple of num_heads {}",
                self.attn_dim, self.num_heads
            )));
        }
        if self.attn_dim == 0 || self.ffn_dim == 0 || self.freq_bins == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.num_heads
    }

    /// Large teacher: 16 layers, 256 attention dims.
    ///
    /// The FFN is widened to 2560 so the plain transformer lands near the
    /// 26M parameters of a Conformer of the same depth and width.
    pub fn large_teacher() -> Self {
        Self {
            num_layers: 16,
            attn_dim: 256,
            num_heads: 4,
            ffn_dim: 2560,
            num_outputs: 2,
            rel_pos_clip: 128,
            freq_bins: 257,
        }
    }

    /// 12-layer, 4-head, 128-dim single-channel student.
    pub fn single_channel_student() -> Self {
        Self {
            num_layers: 12,
            attn_dim: 128,
            num_heads: 4,
            ffn_dim: 2048,
            num_outputs: 2,
            rel_pos_clip: 128,
            freq_bins: 257,
        }
    }

    /// 6-layer, 2-head, 128-dim student.
    pub fn multi_channel_student() -> Self {
        Self {
            num_layers: 6,
            attn_dim: 128,
            num_heads: 2,
            ..Self::single_channel_student()
        }
    }

    /// Teacher sized for single-core experiments.
    pub fn desk_teacher() -> Self {
        Self {
            num_layers: 8,
            attn_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            num_outputs: 2,
            rel_pos_clip: 128,
            freq_bins: 257,
        }
    }

    /// Student sized for single-core experiments.
    pub fn desk_student() -> Self {
        Self {
            num_layers: 3,
            attn_dim: 32,
            num_heads: 2,
            ffn_dim: 128,
            num_outputs: 2,
            rel_pos_clip: 128,
            freq_bins: 257,
        }
    }
}

/// Hidden maps `h_0 ..= h_I` of one forward pass, each `T x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    hidden: Vec<Array2<f64>>,
}

impl LayerTrace {
    pub(crate) fn new(hidden: Vec<Array2<f64>>) -> Self {
        Self { hidden }
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Array2<f64>> {
        self.hidden.get(index)
    }

    pub fn last(&self) -> &Array2<f64> {
        self.hidden.last().expect("trace always holds h_0")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.hidden.iter()
    }

    /// Number of encoder layers, `len() - 1`.
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }
}

impl std::ops::Index<usize> for LayerTrace {
    type Output = Array2<f64>;

    fn index(&self, index: usize) -> &Array2<f64> {
        &self.hidden[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(count: usize, target: f64, tolerance: f64) -> bool {
        ((count as f64 - target) / target).abs() <= tolerance
    }

    #[test]
    fn parameter_counts_match_published_sizes() {
        let count = |cfg: &ModelConfig| Parameters::init(cfg, 0).unwrap().num_parameters();
        let teacher = count(&ModelConfig::large_teacher());
        let single = count(&ModelConfig::single_channel_student());
        let multi = count(&ModelConfig::multi_channel_student());
        assert!(within(teacher, 26.09e6, 0.10), "teacher {teacher}");
        assert!(within(single, 7.25e6, 0.10), "single-channel student {single}");
        assert!(within(multi, 3.89e6, 0.10), "multi-channel student {multi}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk_student();
        cfg.validate().unwrap();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            num_layers: 0,
            ..ModelConfig::desk_student()
        };
        assert!(Parameters::init(&cfg, 0).is_err());
    }
}
