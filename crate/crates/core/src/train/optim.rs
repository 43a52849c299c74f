use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TensorSet;

/// Paper-scale run length the published schedule constants refer to.
pub const REFERENCE_TOTAL_STEPS: u64 = 260_000;
/// Paper-scale warm-up length.
pub const REFERENCE_WARMUP_STEPS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    /// Desk-scale run: 5000 steps with the warm-up fraction of the full schedule.
    fn default() -> Self {
        let total_steps = 5000;
        Self {
            peak_lr: 1e-4,
            weight_decay: 1e-2,
            warmup_steps: scaled_warmup(total_steps),
            total_steps,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Warm-up length keeping the reference warm-up fraction for `total_steps`.
pub fn scaled_warmup(total_steps: u64) -> u64 {
    ((REFERENCE_WARMUP_STEPS as f64 / REFERENCE_TOTAL_STEPS as f64) * total_steps as f64)
        .round()
        .max(1.0) as u64
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("peak_lr must be positive and weight_decay non-negative".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak_lr` followed by linear decay to zero.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let lr = if step <= cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
    };
    Ok(lr)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &impl TensorSet, weight_decay: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update<P: TensorSet>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps, decay) = (self.beta1, self.beta2, self.eps, lr * self.weight_decay);
        let grads = grads.tensors();
        for ((((_, mut p), (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *p -= decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Moment buffers exposed as tensors for checkpointing.
impl TensorSet for AdamW {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let first = self.first.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t.view()));
        let second = self.second.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t.view()));
        first.chain(second).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let first = self.first.iter_mut().enumerate().map(|(i, t)| (format!("m.{i}"), t.view_mut()));
        let second = self.second.iter_mut().enumerate().map(|(i, t)| (format!("v.{i}"), t.view_mut()));
        first.chain(second).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Linear;
    use ndarray::{Array1, Array2};

    #[test]
    fn lr_examples() {
        let cfg = OptimConfig {
            warmup_steps: 10_000,
            total_steps: 260_000,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(10_000, &cfg).unwrap(), 1e-4);
        assert!((lr_at(5_000, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(260_000, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(135_000, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(260_001, &cfg).is_err());
    }

    #[test]
    fn default_is_consistent() {
        let cfg = OptimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.warmup_steps, 192);
        let bad = OptimConfig {
            warmup_steps: 10_000,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    struct Single(Linear);

    impl TensorSet for Single {
        fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
            let mut out = vec![];
            self.0.push_tensors("w", &mut out);
            out
        }
        fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
            let mut out = vec![];
            self.0.push_tensors_mut("w", &mut out);
            out
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Single(Linear {
            weight: Array2::from_elem((1, 2), 1.0),
            bias: Array1::from_elem(2, -1.0),
        });
        let g = Single(Linear {
            weight: Array2::from_shape_vec((1, 2), vec![0.5, -3.0]).unwrap(),
            bias: Array1::zeros(2),
        });
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &g, 0.1);
        // Bias-corrected first step is lr * sign(g).
        assert!((p.0.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.0.weight[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(p.0.bias[0], -1.0);

        let mut decayed = Single(Linear::zeros(1, 1));
        decayed.0.weight[[0, 0]] = 2.0;
        let zero = Single(Linear::zeros(1, 1));
        let mut opt = AdamW::new(&decayed, 0.5);
        opt.update(&mut decayed, &zero, 0.1);
        assert!((decayed.0.weight[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Single(Linear::zeros(1, 3));
        let target = [1.0, -2.0, 0.5];
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..2000 {
            let mut g = Single(Linear::zeros(1, 3));
            for j in 0..3 {
                g.0.weight[[0, j]] = 2.0 * (p.0.weight[[0, j]] - target[j]);
            }
            opt.update(&mut p, &g, 0.01);
        }
        for j in 0..3 {
            assert!((p.0.weight[[0, j]] - target[j]).abs() < 1e-2);
        }
    }
}
