use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{layer_terms, lts_weights, pit_loss_grad, ts_loss_grad, LayerMapSpec, Projection, ProjectionSet};
use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_train, Parameters, TensorSet};

/// Loss assembled from the component terms at each training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Permutation-invariant loss against references.
    Pit,
    /// Masked-signal teacher loss.
    Ts,
    /// Depth-weighted layer-wise teacher loss.
    Lts,
    /// `λ L_TS + (1 - λ) L_PIT`.
    Os,
    /// `λ L_LTS + (1 - λ) L_PIT`.
    LtsOs,
}

impl Objective {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, Objective::Pit)
    }

    pub fn needs_references(self) -> bool {
        matches!(self, Objective::Pit | Objective::Os | Objective::LtsOs)
    }

    pub fn uses_layers(self) -> bool {
        matches!(self, Objective::Lts | Objective::LtsOs)
    }

    pub fn shifted(self) -> bool {
        matches!(self, Objective::Os | Objective::LtsOs)
    }

    /// Total loss from logged components. `components.total` is ignored.
    pub fn recombine(self, c: &LossComponents) -> Result<f64> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::InvalidInput(format!("component {name} missing for {self:?}")))
        };
        let lts = || -> Result<f64> {
            let layers = c
                .layers
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("layer losses missing".into()))?;
            let (weights, ts_weight) = lts_weights(layers.len().saturating_sub(1));
            let ts = need(c.ts, "ts")?;
            Ok(layers.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() + ts_weight * ts)
        };
        Ok(match self {
            Objective::Pit => need(c.pit, "pit")?,
            Objective::Ts => need(c.ts, "ts")?,
            Objective::Lts => lts()?,
            Objective::Os => {
                let lambda = need(c.lambda, "lambda")?;
                lambda * need(c.ts, "ts")? + (1.0 - lambda) * need(c.pit, "pit")?
            }
            Objective::LtsOs => {
                let lambda = need(c.lambda, "lambda")?;
                lambda * lts()? + (1.0 - lambda) * need(c.pit, "pit")?
            }
        })
    }
}

/// Precomputed training inputs for one mixture.
#[derive(Clone, Debug)]
pub struct Example {
    /// `T x F` mixture magnitudes fed to the model.
    pub features: Array2<f64>,
    /// `|Y¹|²`.
    pub mix_power: Array2<f64>,
    /// `S x T x F` reference magnitudes, zero-padded to the model's output count.
    pub references: Option<Array3<f64>>,
}

impl Example {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Example {
        use ndarray::s;
        Example {
            features: self.features.slice(s![start..start + len, ..]).to_owned(),
            mix_power: self.mix_power.slice(s![start..start + len, ..]).to_owned(),
            references: self
                .references
                .as_ref()
                .map(|r| r.slice(s![.., start..start + len, ..]).to_owned()),
        }
    }
}

/// Per-term values of one evaluation; absent terms were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pit: Option<f64>,
    pub ts: Option<f64>,
    pub layers: Option<Vec<f64>>,
    pub lts: Option<f64>,
    pub lambda: Option<f64>,
    pub total: f64,
}

impl LossComponents {
    /// Element-wise mean over a batch, accumulated in order.
    pub fn mean(items: &[LossComponents]) -> LossComponents {
        let n = items.len() as f64;
        let avg = |get: &dyn Fn(&LossComponents) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = items.iter().map(get).collect();
            vals.map(|v| v.iter().sum::<f64>() / n)
        };
        let layers = items[0].layers.as_ref().map(|first| {
            (0..first.len())
                .map(|i| items.iter().map(|c| c.layers.as_ref().unwrap()[i]).sum::<f64>() / n)
                .collect()
        });
        LossComponents {
            pit: avg(&|c| c.pit),
            ts: avg(&|c| c.ts),
            layers,
            lts: avg(&|c| c.lts),
            lambda: items[0].lambda,
            total: items.iter().map(|c| c.total).sum::<f64>() / n,
        }
    }
}

/// Frozen teacher and the student-to-teacher layer correspondence.
#[derive(Clone, Copy)]
pub struct TeacherContext<'a> {
    pub params: &'a Parameters,
    pub layer_map: &'a LayerMapSpec,
}

/// Trainable state: the model and, for layer-wise objectives, its projections.
pub struct Gradients {
    pub model: Parameters,
    pub projections: Option<ProjectionSet>,
}

/// Loss components and gradients of `objective` on one example.
pub fn example_gradients(
    objective: Objective,
    student: &Parameters,
    projections: Option<&ProjectionSet>,
    teacher: Option<TeacherContext<'_>>,
    example: &Example,
    lambda: f64,
) -> Result<(LossComponents, Gradients)> {
    let (comp, grads) = evaluate(objective, student, projections, teacher, example, lambda, true)?;
    Ok((comp, grads.expect("gradients requested")))
}

fn evaluate(
    objective: Objective,
    student: &Parameters,
    projections: Option<&ProjectionSet>,
    teacher: Option<TeacherContext<'_>>,
    example: &Example,
    lambda: f64,
    with_grad: bool,
) -> Result<(LossComponents, Option<Gradients>)> {
    let pass = forward_train(student, &example.features)?;
    let masks = pass.masks.masks();
    let mut comp = LossComponents::default();
    let mut d_masks = Array3::zeros(masks.raw_dim());
    let mut d_hidden: Vec<Option<Array2<f64>>> = vec![];
    let mut proj_grad = None;

    let (pit_w, teacher_w) = if objective.shifted() {
        comp.lambda = Some(lambda);
        (1.0 - lambda, lambda)
    } else {
        (1.0, 1.0)
    };

    if objective.needs_references() {
        let refs = example
            .references
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("objective requires reference signals".into()))?;
        let mix_mag = example.mix_power.mapv(f64::sqrt);
        let (loss, _, grad) = pit_loss_grad(masks, &mix_mag, refs)?;
        comp.pit = Some(loss);
        d_masks.scaled_add(pit_w, &grad);
    }

    if objective.needs_teacher() {
        let ctx = teacher.ok_or_else(|| Error::InvalidInput("objective requires a teacher".into()))?;
        let (t_masks, t_trace) = forward(ctx.params, &example.features)?;
        let (ts, grad) = ts_loss_grad(masks, t_masks.masks(), &example.mix_power)?;
        comp.ts = Some(ts);
        if objective.uses_layers() {
            let proj = projections.ok_or_else(|| Error::InvalidInput("layer-wise objective requires projections".into()))?;
            let terms = layer_terms(&pass.trace, &t_trace, ctx.layer_map, proj)?;
            let (weights, ts_weight) = lts_weights(terms.losses.len() - 1);
            let lts = terms.losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() + ts_weight * ts;
            comp.lts = Some(lts);
            comp.layers = Some(terms.losses);
            d_masks.scaled_add(teacher_w * ts_weight, &grad);

            let mut pg = proj.zeros_like();
            for (i, (dh, dp)) in terms.hidden_grads.into_iter().zip(terms.proj_grads).enumerate() {
                let scale = teacher_w * weights[i];
                d_hidden.push(Some(dh * scale));
                if let (Some(dp), Projection::Affine(slot)) = (dp, &mut pg.maps_mut()[i]) {
                    slot.weight.scaled_add(scale, &dp.weight);
                    slot.bias.scaled_add(scale, &dp.bias);
                }
            }
            proj_grad = Some(pg);
        } else {
            d_masks.scaled_add(teacher_w, &grad);
        }
    }

    comp.total = objective.recombine(&comp)?;
    if !with_grad {
        return Ok((comp, None));
    }
    let model = backward(student, &pass, &d_masks, &d_hidden)?;
    Ok((
        comp,
        Some(Gradients {
            model,
            projections: proj_grad,
        }),
    ))
}

/// Batch-mean components and gradients. Examples are processed in parallel and
/// reduced in index order, so results do not depend on the worker count.
pub fn batch_gradients(
    objective: Objective,
    student: &Parameters,
    projections: Option<&ProjectionSet>,
    teacher: Option<TeacherContext<'_>>,
    batch: &[Example],
    lambda: f64,
) -> Result<(LossComponents, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let results: Vec<(LossComponents, Gradients)> = batch
        .par_iter()
        .map(|ex| example_gradients(objective, student, projections, teacher, ex, lambda))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut comps = Vec::with_capacity(results.len());
    let mut iter = results.into_iter();
    let (first_comp, mut acc) = iter.next().unwrap();
    comps.push(first_comp);
    for (comp, grad) in iter {
        comps.push(comp);
        acc.model.add_scaled(&grad.model, 1.0);
        if let (Some(a), Some(g)) = (acc.projections.as_mut(), grad.projections.as_ref()) {
            a.add_scaled(g, 1.0);
        }
    }
    acc.model.scale(scale);
    if let Some(p) = acc.projections.as_mut() {
        p.scale(scale);
    }
    let mut mean = LossComponents::mean(&comps);
    mean.total = objective.recombine(&mean)?;
    Ok((mean, acc))
}

/// Loss components without gradients, e.g. for validation.
pub fn evaluate_loss(
    objective: Objective,
    student: &Parameters,
    projections: Option<&ProjectionSet>,
    teacher: Option<TeacherContext<'_>>,
    examples: &[Example],
    lambda: f64,
) -> Result<LossComponents> {
    let comps: Vec<LossComponents> = examples
        .par_iter()
        .map(|ex| evaluate(objective, student, projections, teacher, ex, lambda, false).map(|(c, _)| c))
        .collect::<Result<_>>()?;
    let mut mean = LossComponents::mean(&comps);
    mean.total = objective.recombine(&mean)?;
    Ok(mean)
}
