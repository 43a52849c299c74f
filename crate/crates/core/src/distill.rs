//! Distillation and separation objectives.
//!
//! * [`ts_loss`]: MSE between student and teacher masked signals.
//! * [`layer_loss`] / [`lts_loss`]: hidden-map matching under a layer map,
//!   combined with the masked-signal term by a depth-weighted average.
//! * [`pit_loss`]: permutation invariant magnitude MSE against references.
//! * [`lambda_weight`] / [`combined_loss`]: sigmoid annealing from the
//!   teacher objective to the reference objective.
//!
//! The `*_grad` variants return the loss together with its gradient and work
//! on plain magnitude arrays so the training loop can skip complex math.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::model::{LayerTrace, Linear, TensorSet};
use crate::perm::permutations;
use crate::signal::{MaskSet, Spectrogram};

/// Student-to-teacher layer index mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMapVariant {
    /// `g(i) = max(3i - 2, 0)`, 6 student layers onto 16.
    Multi6to16,
    /// `g(i) = min(2i, i + 4)`, 12 student layers onto 16.
    Single12to16,
    /// `g(i) = round(i * I_tea / I_stu)`.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMapSpec {
    pub variant: LayerMapVariant,
    pub student_layers: usize,
    pub teacher_layers: usize,
}

impl LayerMapSpec {
    pub fn uniform(student_layers: usize, teacher_layers: usize) -> Self {
        Self {
            variant: LayerMapVariant::Uniform,
            student_layers,
            teacher_layers,
        }
    }

    pub fn multi6to16() -> Self {
        Self {
            variant: LayerMapVariant::Multi6to16,
            student_layers: 6,
            teacher_layers: 16,
        }
    }

    pub fn single12to16() -> Self {
        Self {
            variant: LayerMapVariant::Single12to16,
            student_layers: 12,
            teacher_layers: 16,
        }
    }

    /// Every mapped index for `i = 0 ..= student_layers`.
    pub fn indices(&self) -> Result<Vec<usize>> {
        (0..=self.student_layers).map(|i| layer_map(i, self)).collect()
    }
}

/// Teacher layer matched by student layer `i`.
pub fn layer_map(i: usize, spec: &LayerMapSpec) -> Result<usize> {
    if i > spec.student_layers {
        return Err(Error::InvalidInput(format!(
            "student layer {i} outside 0..={}",
            spec.student_layers
        )));
    }
    let g = match spec.variant {
        LayerMapVariant::Multi6to16 => (3 * i).saturating_sub(2),
        LayerMapVariant::Single12to16 => (2 * i).min(i + 4),
        LayerMapVariant::Uniform => {
            if spec.student_layers == 0 {
                0
            } else {
                (i as f64 * spec.teacher_layers as f64 / spec.student_layers as f64).round() as usize
            }
        }
    };
    if g > spec.teacher_layers {
        return Err(Error::InvalidInput(format!(
            "layer map sends student layer {i} to {g}, beyond teacher depth {}",
            spec.teacher_layers
        )));
    }
    Ok(g)
}

/// Annealing parameters for `λ(t) = sigmoid(-k (t - t0))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSchedule {
    pub k: f64,
    pub t0: u64,
}

impl ShiftSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("annealing rate k must be positive, got {}", self.k)));
        }
        Ok(())
    }

    /// Rescales a schedule tuned for `reference_steps` to a run of `total_steps`,
    /// preserving its shape in normalized time.
    pub fn rescaled(&self, reference_steps: u64, total_steps: u64) -> Self {
        let ratio = reference_steps as f64 / total_steps as f64;
        Self {
            k: self.k * ratio,
            t0: (self.t0 as f64 / ratio).round() as u64,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weight of the teacher objective at step `t`.
pub fn lambda_weight(t: f64, schedule: &ShiftSchedule) -> f64 {
    sigmoid(-schedule.k * (t - schedule.t0 as f64))
}

/// `λ(t) L_teacher + (1 - λ(t)) L_PIT`.
///
/// The decaying weight multiplies the teacher term, so training starts from
/// the teacher's predictions and ends on the references.
pub fn combined_loss(l_pit: f64, l_teacher: f64, t: f64, schedule: &ShiftSchedule) -> f64 {
    let lambda = lambda_weight(t, schedule);
    lambda * l_teacher + (1.0 - lambda) * l_pit
}

/// Student-side map into the teacher's hidden width.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Identity,
    Affine(Linear),
}

impl Projection {
    pub fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        match self {
            Projection::Identity => h.clone(),
            Projection::Affine(lin) => lin.apply(h),
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Projection::Identity => input_dim,
            Projection::Affine(lin) => lin.outputs(),
        }
    }
}

/// One projection per student hidden map `h_0 ..= h_I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    maps: Vec<Projection>,
}

impl ProjectionSet {
    /// Identity maps when the widths agree, fan-in uniform affine maps otherwise.
    pub fn new(student_layers: usize, student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = (0..=student_layers)
            .map(|_| {
                if student_dim == teacher_dim {
                    Projection::Identity
                } else {
                    Projection::Affine(Linear::fan_in_uniform(student_dim, teacher_dim, &mut rng))
                }
            })
            .collect();
        Self { maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, i: usize) -> &Projection {
        &self.maps[i]
    }

    pub fn maps(&self) -> &[Projection] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Projection] {
        &mut self.maps
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .map(|p| match p {
                    Projection::Identity => Projection::Identity,
                    Projection::Affine(lin) => Projection::Affine(Linear::zeros(lin.inputs(), lin.outputs())),
                })
                .collect(),
        }
    }
}

impl TensorSet for ProjectionSet {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.maps.iter().enumerate() {
            if let Projection::Affine(lin) = p {
                lin.push_tensors(&format!("proj.{i}"), &mut out);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.maps.iter_mut().enumerate() {
            if let Projection::Affine(lin) = p {
                lin.push_tensors_mut(&format!("proj.{i}"), &mut out);
            }
        }
        out
    }
}

fn check_mask_pair(a: &MaskSet, b: &MaskSet, mix: &Spectrogram) -> Result<()> {
    if a.masks().dim() != b.masks().dim() {
        return Err(shape_mismatch("mask sets", a.masks().dim(), b.masks().dim()));
    }
    if (a.num_frames(), a.num_bins()) != (mix.num_frames(), mix.num_bins()) {
        return Err(shape_mismatch(
            "masks vs mixture",
            (mix.num_frames(), mix.num_bins()),
            (a.num_frames(), a.num_bins()),
        ));
    }
    Ok(())
}

/// Mean squared distance between student and teacher masked mixtures,
/// normalized by `T * F * S`. Sources are compared in the teacher's order.
pub fn ts_loss(student: &MaskSet, teacher: &MaskSet, mix: &Spectrogram) -> Result<f64> {
    check_mask_pair(student, teacher, mix)?;
    let power = mix.first_channel().mapv(|z| z.norm_sqr());
    Ok(ts_loss_grad(student.masks(), teacher.masks(), &power)?.0)
}

/// Value and `dL/dM_student` of [`ts_loss`] given the mixture power `|Y¹|²`.
pub fn ts_loss_grad(
    student: &Array3<f64>,
    teacher: &Array3<f64>,
    mix_power: &Array2<f64>,
) -> Result<(f64, Array3<f64>)> {
    let (sources, frames, bins) = student.dim();
    if teacher.dim() != student.dim() || mix_power.dim() != (frames, bins) {
        return Err(shape_mismatch("ts_loss", student.dim(), (teacher.dim(), mix_power.dim())));
    }
    let norm = (sources * frames * bins) as f64;
    let mut grad = Array3::zeros(student.raw_dim());
    let mut total = 0.0;
    for s in 0..sources {
        Zip::from(grad.index_axis_mut(Axis(0), s))
            .and(student.index_axis(Axis(0), s))
            .and(teacher.index_axis(Axis(0), s))
            .and(mix_power)
            .for_each(|g, &ms, &mt, &p| {
                let diff = ms - mt;
                total += diff * diff * p;
                *g = 2.0 * diff * p / norm;
            });
    }
    Ok((total / norm, grad))
}

/// `‖proj(h_stu) - h_tea‖² / (T * d_tea)`.
pub fn layer_loss(h_student: &Array2<f64>, h_teacher: &Array2<f64>, proj: &Projection) -> Result<f64> {
    Ok(layer_loss_grad(h_student, h_teacher, proj)?.0)
}

/// Value, `dL/dh_stu` and (for affine maps) the projection gradient.
pub fn layer_loss_grad(
    h_student: &Array2<f64>,
    h_teacher: &Array2<f64>,
    proj: &Projection,
) -> Result<(f64, Array2<f64>, Option<Linear>)> {
    let out_dim = proj.output_dim(h_student.ncols());
    if let Projection::Affine(lin) = proj {
        if lin.inputs() != h_student.ncols() {
            return Err(shape_mismatch("layer_loss projection", lin.inputs(), h_student.ncols()));
        }
    }
    if h_student.nrows() != h_teacher.nrows() || out_dim != h_teacher.ncols() {
        return Err(shape_mismatch(
            "layer_loss",
            (h_teacher.nrows(), h_teacher.ncols()),
            (h_student.nrows(), out_dim),
        ));
    }
    let diff = proj.apply(h_student) - h_teacher;
    let norm = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / norm;
    let d_out = diff * (2.0 / norm);
    match proj {
        Projection::Identity => Ok((loss, d_out, None)),
        Projection::Affine(lin) => {
            let grad = Linear {
                weight: h_student.t().dot(&d_out),
                bias: d_out.sum_axis(Axis(0)),
            };
            Ok((loss, d_out.dot(&lin.weight.t()), Some(grad)))
        }
    }
}

/// Depth-proportional weights: `(i + 1) / Z` for `L_i` and `(I + 1) / Z` for
/// the masked-signal term, `Z = Σ_{i=0}^{I} (i + 1) + (I + 1)`.
pub fn lts_weights(student_layers: usize) -> (Vec<f64>, f64) {
    let layers = student_layers as f64;
    let z = (layers + 1.0) * (layers + 2.0) / 2.0 + (layers + 1.0);
    let per_layer = (0..=student_layers).map(|i| (i as f64 + 1.0) / z).collect();
    (per_layer, (layers + 1.0) / z)
}

/// Weighted average of the layer-wise losses and the masked-signal loss.
pub fn lts_combine(layer_losses: &[f64], ts: f64) -> f64 {
    let (weights, ts_weight) = lts_weights(layer_losses.len().saturating_sub(1));
    layer_losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() + ts_weight * ts
}

fn check_traces(student: &LayerTrace, teacher: &LayerTrace, spec: &LayerMapSpec, proj: &ProjectionSet) -> Result<()> {
    if student.len() != spec.student_layers + 1 {
        return Err(shape_mismatch("student trace", spec.student_layers + 1, student.len()));
    }
    if teacher.len() != spec.teacher_layers + 1 {
        return Err(shape_mismatch("teacher trace", spec.teacher_layers + 1, teacher.len()));
    }
    if proj.len() != student.len() {
        return Err(shape_mismatch("projection set", student.len(), proj.len()));
    }
    Ok(())
}

/// Layer-wise objective from complete traces and an already computed `L_TS`.
pub fn lts_loss(
    student: &LayerTrace,
    teacher: &LayerTrace,
    spec: &LayerMapSpec,
    proj: &ProjectionSet,
    ts: f64,
) -> Result<f64> {
    check_traces(student, teacher, spec, proj)?;
    let losses = (0..student.len())
        .map(|i| layer_loss(&student[i], &teacher[layer_map(i, spec)?], proj.get(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(lts_combine(&losses, ts))
}

/// Per-layer losses and gradients for the layer-wise objective.
pub struct LayerTerms {
    pub losses: Vec<f64>,
    /// `dL_i/dh_i^stu`, unweighted.
    pub hidden_grads: Vec<Array2<f64>>,
    /// Projection gradients of each unweighted `L_i`.
    pub proj_grads: Vec<Option<Linear>>,
}

pub fn layer_terms(
    student: &LayerTrace,
    teacher: &LayerTrace,
    spec: &LayerMapSpec,
    proj: &ProjectionSet,
) -> Result<LayerTerms> {
    check_traces(student, teacher, spec, proj)?;
    let mut terms = LayerTerms {
        losses: Vec::with_capacity(student.len()),
        hidden_grads: Vec::with_capacity(student.len()),
        proj_grads: Vec::with_capacity(student.len()),
    };
    for i in 0..student.len() {
        let (loss, dh, dp) = layer_loss_grad(&student[i], &teacher[layer_map(i, spec)?], proj.get(i))?;
        terms.losses.push(loss);
        terms.hidden_grads.push(dh);
        terms.proj_grads.push(dp);
    }
    Ok(terms)
}

/// Minimum over output permutations of the magnitude MSE against references.
///
/// Returns the loss and `π` with output `π[s]` assigned to reference `s`;
/// ties go to the lexicographically smallest `π`.
pub fn pit_loss(masks: &MaskSet, references: &[Spectrogram], mix: &Spectrogram) -> Result<(f64, Vec<usize>)> {
    let (sources, frames, bins) = masks.masks().dim();
    if references.len() != sources {
        return Err(shape_mismatch("pit_loss references", sources, references.len()));
    }
    if (frames, bins) != (mix.num_frames(), mix.num_bins()) {
        return Err(shape_mismatch("pit_loss mixture", (frames, bins), (mix.num_frames(), mix.num_bins())));
    }
    let mut ref_mag = Array3::zeros((sources, frames, bins));
    for (s, r) in references.iter().enumerate() {
        if (r.num_frames(), r.num_bins()) != (frames, bins) {
            return Err(shape_mismatch("pit_loss reference", (frames, bins), (r.num_frames(), r.num_bins())));
        }
        ref_mag
            .index_axis_mut(Axis(0), s)
            .assign(&r.first_channel().mapv(|z| z.norm()));
    }
    let mix_mag = mix.first_channel().mapv(|z| z.norm());
    let (loss, perm, _) = pit_loss_grad(masks.masks(), &mix_mag, &ref_mag)?;
    Ok((loss, perm))
}

/// Value, best permutation and `dL/dM` of [`pit_loss`] on magnitude arrays.
pub fn pit_loss_grad(
    masks: &Array3<f64>,
    mix_mag: &Array2<f64>,
    ref_mag: &Array3<f64>,
) -> Result<(f64, Vec<usize>, Array3<f64>)> {
    let (sources, frames, bins) = masks.dim();
    if sources > 4 {
        return Err(Error::UnsupportedCardinality(sources));
    }
    if ref_mag.dim() != masks.dim() || mix_mag.dim() != (frames, bins) {
        return Err(shape_mismatch("pit_loss", masks.dim(), (ref_mag.dim(), mix_mag.dim())));
    }
    let norm = (sources * frames * bins) as f64;
    // cost[o][r]: squared error of output o against reference r.
    let mut cost = vec![vec![0.0; sources]; sources];
    for (o, row) in cost.iter_mut().enumerate() {
        for (r, c) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            Zip::from(masks.index_axis(Axis(0), o))
                .and(mix_mag)
                .and(ref_mag.index_axis(Axis(0), r))
                .for_each(|&m, &y, &x| {
                    let d = m * y - x;
                    acc += d * d;
                });
            *c = acc;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(sources) {
        // Summed in sorted order so the value does not depend on reference order.
        let mut terms: Vec<f64> = perm.iter().enumerate().map(|(r, &o)| cost[o][r]).collect();
        terms.sort_by(f64::total_cmp);
        let total: f64 = terms.iter().sum();
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.expect("at least one permutation");
    let mut grad = Array3::zeros(masks.raw_dim());
    for (r, &o) in perm.iter().enumerate() {
        Zip::from(grad.index_axis_mut(Axis(0), o))
            .and(masks.index_axis(Axis(0), o))
            .and(mix_mag)
            .and(ref_mag.index_axis(Axis(0), r))
            .for_each(|g, &m, &y, &x| *g = 2.0 * (m * y - x) * y / norm);
    }
    Ok((total / norm, perm, grad))
}
