use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::sample_batch;
use super::objective::{batch_gradients, Example, LossComponents, Objective, TeacherContext};
use super::optim::{lr_at, AdamW, OptimConfig};
use crate::distill::{lambda_weight, ProjectionSet, ShiftSchedule};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Parameters, TensorSet};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub lambda: Option<f64>,
    pub pit: Option<f64>,
    pub ts: Option<f64>,
    pub layers: Option<Vec<f64>>,
    pub lts: Option<f64>,
    pub total: f64,
}

impl LogRecord {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            pit: self.pit,
            ts: self.ts,
            layers: self.layers.clone(),
            lts: self.lts,
            lambda: self.lambda,
            total: self.total,
        }
    }
}

/// Model, projections and optimizer state of a run in progress.
pub struct Session {
    pub objective: Objective,
    pub optim: OptimConfig,
    pub schedule: ShiftSchedule,
    pub crop_frames: usize,
    pub model: Parameters,
    pub projections: Option<ProjectionSet>,
    model_opt: AdamW,
    proj_opt: Option<AdamW>,
    step: u64,
}

impl Session {
    pub fn new(
        objective: Objective,
        model: Parameters,
        projections: Option<ProjectionSet>,
        optim: OptimConfig,
        schedule: ShiftSchedule,
        crop_frames: usize,
    ) -> Result<Self> {
        optim.validate()?;
        schedule.validate()?;
        if crop_frames == 0 {
            return Err(Error::Config("crop_frames must be positive".into()));
        }
        if objective.uses_layers() && projections.is_none() {
            return Err(Error::Config(format!("{objective:?} requires a projection set")));
        }
        let model_opt = AdamW::new(&model, optim.weight_decay);
        let proj_opt = projections.as_ref().map(|p| AdamW::new(p, optim.weight_decay));
        Ok(Self {
            objective,
            optim,
            schedule,
            crop_frames,
            model,
            projections,
            model_opt,
            proj_opt,
            step: 0,
        })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.optim.total_steps
    }

    /// One optimizer update. Step `t` (1-based) uses `lr_at(t)` and `λ(t)`.
    pub fn advance(&mut self, train: &[Example], teacher: Option<TeacherContext<'_>>) -> Result<LogRecord> {
        if self.is_finished() {
            return Err(Error::InvalidInput("session already reached total_steps".into()));
        }
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let t = self.step + 1;
        let lr = lr_at(t, &self.optim)?;
        let lambda = lambda_weight(t as f64, &self.schedule);
        let batch = sample_batch(train, self.optim.seed, t, self.optim.batch_size, self.crop_frames);
        let (comp, grads) = batch_gradients(
            self.objective,
            &self.model,
            self.projections.as_ref(),
            teacher,
            &batch,
            lambda,
        )?;
        if !comp.total.is_finite() || !grads.model.all_finite() {
            return Err(Error::Numeric {
                stage: "training update",
                layer: self.model.config.num_layers,
            });
        }
        self.model_opt.update(&mut self.model, &grads.model, lr);
        if let (Some(p), Some(g), Some(opt)) = (self.projections.as_mut(), grads.projections.as_ref(), self.proj_opt.as_mut()) {
            opt.update(p, g, lr);
        }
        self.step = t;
        Ok(LogRecord {
            step: t,
            lr,
            lambda: comp.lambda,
            pit: comp.pit,
            ts: comp.ts,
            layers: comp.layers,
            lts: comp.lts,
            total: comp.total,
        })
    }

    /// Runs until `total_steps`, passing each record to `sink`.
    pub fn run(
        &mut self,
        train: &[Example],
        teacher: Option<TeacherContext<'_>>,
        mut sink: impl FnMut(&Session, &LogRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let record = self.advance(train, teacher)?;
            sink(self, &record)?;
        }
        Ok(())
    }

    /// Full state: model, projections, optimizer moments and run settings.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_parameters(&self.model, self.step);
        if let Some(p) = &self.projections {
            ckpt.push_set("proj", p);
            let teacher_dim = p.get(0).output_dim(self.model.config.attn_dim);
            ckpt.metadata.insert("teacher_dim".into(), json!(teacher_dim));
            ckpt.metadata.insert("projection_count".into(), json!(p.len()));
        }
        ckpt.push_set("adam.model", &self.model_opt);
        if let Some(opt) = &self.proj_opt {
            ckpt.push_set("adam.proj", opt);
        }
        ckpt.metadata.insert("objective".into(), json!(self.objective));
        ckpt.metadata.insert("optim".into(), json!(self.optim));
        ckpt.metadata.insert("schedule".into(), json!(self.schedule));
        ckpt.metadata.insert("crop_frames".into(), json!(self.crop_frames));
        ckpt
    }

    /// Restores a session written by [`Session::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ckpt.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {name}")))
        };
        let objective: Objective = serde_json::from_value(field("objective")?)?;
        let optim: OptimConfig = serde_json::from_value(field("optim")?)?;
        let schedule: ShiftSchedule = serde_json::from_value(field("schedule")?)?;
        let crop_frames: usize = serde_json::from_value(field("crop_frames")?)?;
        let model = ckpt.parameters()?;
        let projections = load_projections(ckpt)?;
        let mut session = Session::new(objective, model, projections, optim, schedule, crop_frames)?;
        ckpt.load_set("adam.model", &mut session.model_opt)?;
        session.model_opt.steps = ckpt.step;
        if let Some(opt) = session.proj_opt.as_mut() {
            ckpt.load_set("adam.proj", opt)?;
            opt.steps = ckpt.step;
        }
        session.step = ckpt.step;
        Ok(session)
    }
}

/// Projection set stored under `proj.`, if any.
pub fn load_projections(ckpt: &Checkpoint) -> Result<Option<ProjectionSet>> {
    let count = ckpt
        .metadata
        .get("projection_count")
        .and_then(|v| v.as_u64());
    if !ckpt.has_set("proj") && count.is_none() {
        return Ok(None);
    }
    let teacher_dim = ckpt
        .metadata
        .get("teacher_dim")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint with projections lacks teacher_dim".into()))?;
    let cfg = &ckpt.config;
    let mut proj = ProjectionSet::new(cfg.num_layers, cfg.attn_dim, teacher_dim as usize, 0);
    ckpt.load_set("proj", &mut proj)?;
    Ok(Some(proj))
}
