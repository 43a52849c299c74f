use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::{prepare_examples, split_indices};
use super::objective::{evaluate_loss, Example, Objective, TeacherContext};
use super::optim::{scaled_warmup, OptimConfig, REFERENCE_TOTAL_STEPS};
use super::session::{load_projections, LogRecord, Session};
use crate::distill::{LayerMapSpec, LayerMapVariant, ProjectionSet, ShiftSchedule};
use crate::error::{Error, Result};
use crate::mixer::{read_corpus, MixtureSample};
use crate::model::{Checkpoint, ModelConfig, Parameters};
use crate::signal::StftConfig;

/// Environment variable overriding the checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "CSS_DISTILL_CHECKPOINT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Teacher,
    Baseline,
    VanillaTs,
    Lts,
    Os,
    LtsOs,
    UnlabeledLtsOs,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Teacher,
        Mode::Baseline,
        Mode::VanillaTs,
        Mode::Lts,
        Mode::Os,
        Mode::LtsOs,
        Mode::UnlabeledLtsOs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::Baseline => "baseline",
            Mode::VanillaTs => "vanilla_ts",
            Mode::Lts => "lts",
            Mode::Os => "os",
            Mode::LtsOs => "lts_os",
            Mode::UnlabeledLtsOs => "unlabeled_lts_os",
        }
    }

    /// Objective of the labeled stage.
    pub fn objective(self) -> Objective {
        match self {
            Mode::Teacher | Mode::Baseline => Objective::Pit,
            Mode::VanillaTs => Objective::Ts,
            Mode::Lts => Objective::Lts,
            Mode::Os => Objective::Os,
            Mode::LtsOs | Mode::UnlabeledLtsOs => Objective::LtsOs,
        }
    }

    pub fn is_distillation(self) -> bool {
        !matches!(self, Mode::Teacher | Mode::Baseline)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Objective-shifting grids at reference scale, rescaled to the run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k: Vec<f64>,
    /// Midpoints for students trained from scratch.
    pub t0: Vec<u64>,
    /// Midpoints after layer-wise pretraining.
    pub pretrained_t0: Vec<u64>,
    pub reference_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            k: vec![1e-4, 5e-4],
            t0: vec![150_000],
            pretrained_t0: vec![10_000, 20_000],
            reference_steps: REFERENCE_TOTAL_STEPS,
        }
    }
}

impl ScheduleConfig {
    /// Every `(k, t0)` pair of the grid, rescaled to `total_steps`.
    pub fn candidates(&self, pretrained: bool, total_steps: u64) -> Result<Vec<ShiftSchedule>> {
        let t0s = if pretrained { &self.pretrained_t0 } else { &self.t0 };
        if self.k.is_empty() || t0s.is_empty() || self.reference_steps == 0 {
            return Err(Error::Config("schedule grid must be non-empty".into()));
        }
        let mut out = Vec::new();
        for &k in &self.k {
            for &t0 in t0s {
                let s = ShiftSchedule { k, t0 }.rescaled(self.reference_steps, total_steps);
                s.validate()?;
                out.push(s);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per training crop.
    pub crop_frames: usize,
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_frames: 64,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Manifest of the labeled corpus.
    pub labeled: Option<PathBuf>,
    /// Manifest of the unlabeled corpus.
    pub unlabeled: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub mode: Mode,
    /// Trained model; defaults to the desk teacher or desk student by mode.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Steps of unlabeled layer-wise pretraining; defaults to `optim.total_steps`.
    #[serde(default)]
    pub pretrain_steps: Option<u64>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_layer_map")]
    pub layer_map: LayerMapVariant,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub paths: Paths,
}

fn default_layer_map() -> LayerMapVariant {
    LayerMapVariant::Uniform
}

impl RunManifest {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            model: None,
            optim: OptimConfig::default(),
            pretrain_steps: None,
            schedule: ScheduleConfig::default(),
            layer_map: LayerMapVariant::Uniform,
            stft: StftConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.mode {
            Mode::Teacher => ModelConfig::desk_teacher(),
            _ => ModelConfig::desk_student(),
        })
    }

    /// Configuration checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        self.optim.validate()?;
        self.stft.validate()?;
        if model.freq_bins != self.stft.num_bins() {
            return Err(Error::Config(format!(
                "model expects {} frequency bins, STFT yields {}",
                model.freq_bins,
                self.stft.num_bins()
            )));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.data.crop_frames == 0 {
            return Err(Error::Config("crop_frames must be positive".into()));
        }
        self.schedule.candidates(false, self.optim.total_steps)?;
        self.schedule.candidates(true, self.optim.total_steps)?;
        if self.pretrain_steps == Some(0) {
            return Err(Error::Config("pretrain_steps must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every input the mode reads is named.
    pub fn validate_paths(&self) -> Result<()> {
        let missing = |what: &str| Err(Error::Config(format!("mode {} requires {what}", self.mode.name())));
        if self.paths.labeled.is_none() {
            return missing("paths.labeled");
        }
        if self.mode.is_distillation() && self.paths.teacher_checkpoint.is_none() {
            return missing("paths.teacher_checkpoint");
        }
        if self.mode == Mode::UnlabeledLtsOs && self.paths.unlabeled.is_none() {
            return missing("paths.unlabeled");
        }
        Ok(())
    }

    fn stage1_optim(&self) -> OptimConfig {
        let total = self.pretrain_steps.unwrap_or(self.optim.total_steps);
        OptimConfig {
            total_steps: total,
            warmup_steps: if total == self.optim.total_steps {
                self.optim.warmup_steps
            } else {
                scaled_warmup(total)
            },
            ..self.optim.clone()
        }
    }
}

/// Result of one training stage.
pub struct StageOutcome {
    /// Final session state; metadata records validation losses.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub initial_validation: f64,
    pub final_validation: f64,
    pub schedule: ShiftSchedule,
}

impl StageOutcome {
    pub fn parameters(&self) -> Result<Parameters> {
        self.checkpoint.parameters()
    }
}

struct Split {
    train: Vec<Example>,
    validation: Vec<Example>,
}

fn split(examples: Vec<Example>, fraction: f64, seed: u64) -> Result<Split> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let (train_idx, val_idx) = split_indices(examples.len(), fraction, seed);
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut take = |idx: Vec<usize>| idx.into_iter().map(|i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let train = take(train_idx);
    let validation = take(val_idx);
    Ok(Split { train, validation })
}

fn prepare(manifest: &RunManifest, samples: &[MixtureSample], labeled: bool) -> Result<Split> {
    if labeled {
        if let Some(i) = samples.iter().position(|s| !s.is_labeled()) {
            return Err(Error::InvalidInput(format!("labeled corpus item {i} has no references")));
        }
    }
    let model = manifest.model_config();
    let examples = prepare_examples(samples, &manifest.stft, model.num_outputs)?;
    let examples = if labeled {
        examples
    } else {
        // Reference signals are never read during unlabeled training.
        examples
            .into_iter()
            .map(|e| Example { references: None, ..e })
            .collect()
    };
    split(examples, manifest.data.validation_fraction, manifest.optim.seed)
}

fn layer_map_spec(manifest: &RunManifest, student: &ModelConfig, teacher: &ModelConfig) -> Result<LayerMapSpec> {
    let spec = LayerMapSpec {
        variant: manifest.layer_map,
        student_layers: student.num_layers,
        teacher_layers: teacher.num_layers,
    };
    spec.indices()?;
    Ok(spec)
}

/// Validation loss of `objective` on held-out data, or NaN without data.
fn validation_loss(
    objective: Objective,
    session: &Session,
    teacher: Option<TeacherContext<'_>>,
    validation: &[Example],
) -> Result<f64> {
    if validation.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(evaluate_loss(objective, &session.model, session.projections.as_ref(), teacher, validation, 0.0)?.total)
}

type LogSink<'a> = &'a mut dyn FnMut(&LogRecord) -> Result<()>;

fn run_stage(
    mut session: Session,
    data: &Split,
    teacher: Option<TeacherContext<'_>>,
    validation_objective: Objective,
    sink: LogSink<'_>,
) -> Result<StageOutcome> {
    let initial_validation = validation_loss(validation_objective, &session, teacher, &data.validation)?;
    let mut log = Vec::new();
    session.run(&data.train, teacher, |_, record| {
        sink(record)?;
        log.push(record.clone());
        Ok(())
    })?;
    let final_validation = validation_loss(validation_objective, &session, teacher, &data.validation)?;
    let mut checkpoint = session.checkpoint();
    checkpoint
        .metadata
        .insert("validation_objective".into(), json!(validation_objective));
    checkpoint
        .metadata
        .insert("initial_validation_loss".into(), json!(initial_validation));
    checkpoint.metadata.insert("validation_loss".into(), json!(final_validation));
    Ok(StageOutcome {
        checkpoint,
        log,
        initial_validation,
        final_validation,
        schedule: session.schedule,
    })
}

fn train_from_scratch(manifest: &RunManifest, labeled: &[MixtureSample], sink: LogSink<'_>) -> Result<StageOutcome> {
    manifest.validate()?;
    let data = prepare(manifest, labeled, true)?;
    let model = Parameters::init(&manifest.model_config(), manifest.optim.seed)?;
    let schedule = manifest.schedule.candidates(false, manifest.optim.total_steps)?[0];
    let session = Session::new(
        Objective::Pit,
        model,
        None,
        manifest.optim.clone(),
        schedule,
        manifest.data.crop_frames,
    )?;
    let mut outcome = run_stage(session, &data, None, Objective::Pit, sink)?;
    outcome
        .checkpoint
        .metadata
        .insert("mode".into(), json!(manifest.mode));
    Ok(outcome)
}

/// Trains the teacher with the permutation-invariant loss only.
pub fn train_teacher(manifest: &RunManifest, labeled: &[MixtureSample]) -> Result<StageOutcome> {
    train_from_scratch(manifest, labeled, &mut |_| Ok(()))
}

/// Trains the student architecture from scratch with the permutation-invariant loss.
pub fn train_baseline(manifest: &RunManifest, labeled: &[MixtureSample]) -> Result<StageOutcome> {
    train_from_scratch(manifest, labeled, &mut |_| Ok(()))
}

fn fresh_student(manifest: &RunManifest, teacher: &Parameters) -> Result<(Parameters, ProjectionSet)> {
    let cfg = manifest.model_config();
    let model = Parameters::init(&cfg, manifest.optim.seed)?;
    let proj = ProjectionSet::new(
        cfg.num_layers,
        cfg.attn_dim,
        teacher.config.attn_dim,
        manifest.optim.seed.wrapping_add(1),
    );
    Ok((model, proj))
}

fn stage1_with_sink(
    manifest: &RunManifest,
    teacher: &Parameters,
    unlabeled: &[MixtureSample],
    sink: LogSink<'_>,
) -> Result<StageOutcome> {
    manifest.validate()?;
    let (model, proj) = fresh_student(manifest, teacher)?;
    let spec = layer_map_spec(manifest, &model.config, &teacher.config)?;
    let ctx = TeacherContext {
        params: teacher,
        layer_map: &spec,
    };
    let data = prepare(manifest, unlabeled, false)?;
    let optim = manifest.stage1_optim();
    let schedule = manifest.schedule.candidates(true, optim.total_steps)?[0];
    let session = Session::new(Objective::Lts, model, Some(proj), optim, schedule, manifest.data.crop_frames)?;
    let mut outcome = run_stage(session, &data, Some(ctx), Objective::Lts, sink)?;
    outcome.checkpoint.metadata.insert("stage".into(), json!(1));
    Ok(outcome)
}

/// Layer-wise pretraining of a fresh student on unlabeled mixtures.
pub fn distill_stage1(manifest: &RunManifest, teacher: &Parameters, unlabeled: &[MixtureSample]) -> Result<StageOutcome> {
    stage1_with_sink(manifest, teacher, unlabeled, &mut |_| Ok(()))
}

fn stage2_with_sink(
    manifest: &RunManifest,
    teacher: &Parameters,
    student_init: Option<&Checkpoint>,
    labeled: &[MixtureSample],
    sink: LogSink<'_>,
) -> Result<StageOutcome> {
    manifest.validate()?;
    if !manifest.mode.is_distillation() {
        return Err(Error::Config(format!("mode {} is not a distillation mode", manifest.mode.name())));
    }
    let objective = manifest.mode.objective();
    let (model, proj) = match student_init {
        Some(ckpt) => {
            let model = ckpt.parameters()?;
            let proj = match load_projections(ckpt)? {
                Some(p) => p,
                None => fresh_student(manifest, teacher)?.1,
            };
            (model, proj)
        }
        None => fresh_student(manifest, teacher)?,
    };
    if model.config != manifest.model_config() {
        return Err(Error::Config("student initialization does not match the model config".into()));
    }
    let spec = layer_map_spec(manifest, &model.config, &teacher.config)?;
    let ctx = TeacherContext {
        params: teacher,
        layer_map: &spec,
    };
    let data = prepare(manifest, labeled, true)?;
    let proj = objective.uses_layers().then_some(proj);
    let candidates = if objective.shifted() {
        manifest
            .schedule
            .candidates(student_init.is_some(), manifest.optim.total_steps)?
    } else {
        vec![manifest.schedule.candidates(false, manifest.optim.total_steps)?[0]]
    };

    // Candidates are compared by held-out permutation-invariant loss.
    let mut best: Option<StageOutcome> = None;
    let mut trials = Vec::new();
    for schedule in candidates {
        let session = Session::new(
            objective,
            model.clone(),
            proj.clone(),
            manifest.optim.clone(),
            schedule,
            manifest.data.crop_frames,
        )?;
        let mut buffered = Vec::new();
        let outcome = run_stage(session, &data, Some(ctx), Objective::Pit, &mut |r| {
            buffered.push(r.clone());
            Ok(())
        })?;
        trials.push(json!({"k": schedule.k, "t0": schedule.t0, "validation_loss": outcome.final_validation}));
        if best.as_ref().map_or(true, |b| outcome.final_validation < b.final_validation) {
            best = Some(outcome);
        }
    }
    let mut best = best.expect("non-empty candidate list");
    for record in &best.log {
        sink(record)?;
    }
    let meta = &mut best.checkpoint.metadata;
    meta.insert("mode".into(), json!(manifest.mode));
    meta.insert("stage".into(), json!(2));
    meta.insert("schedule_trials".into(), json!(trials));
    Ok(best)
}

/// Labeled distillation with the mode's objective, selecting the shift
/// schedule from the grid by held-out loss.
pub fn distill_stage2(
    manifest: &RunManifest,
    teacher: &Parameters,
    student_init: Option<&Checkpoint>,
    labeled: &[MixtureSample],
) -> Result<StageOutcome> {
    stage2_with_sink(manifest, teacher, student_init, labeled, &mut |_| Ok(()))
}

/// Full distillation for the manifest's mode, pretraining on `unlabeled`
/// first when the mode asks for it.
pub fn distill(
    manifest: &RunManifest,
    teacher: &Parameters,
    labeled: &[MixtureSample],
    unlabeled: Option<&[MixtureSample]>,
) -> Result<StageOutcome> {
    distill_with_sink(manifest, teacher, labeled, unlabeled, &mut |_| Ok(()))
}

fn distill_with_sink(
    manifest: &RunManifest,
    teacher: &Parameters,
    labeled: &[MixtureSample],
    unlabeled: Option<&[MixtureSample]>,
    sink: LogSink<'_>,
) -> Result<StageOutcome> {
    if manifest.mode == Mode::UnlabeledLtsOs {
        let unlabeled =
            unlabeled.ok_or_else(|| Error::Config("mode unlabeled_lts_os requires an unlabeled corpus".into()))?;
        let pre = stage1_with_sink(manifest, teacher, unlabeled, sink)?;
        stage2_with_sink(manifest, teacher, Some(&pre.checkpoint), labeled, sink)
    } else {
        stage2_with_sink(manifest, teacher, None, labeled, sink)
    }
}

/// Checkpoint directory from the manifest, falling back to the environment.
pub fn checkpoint_dir(manifest: &RunManifest) -> Option<PathBuf> {
    manifest
        .paths
        .checkpoint_dir
        .clone()
        .or_else(|| std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from))
}

/// Runs a manifest end to end from files. Writes `<mode>.ckpt` and
/// `<mode>.log.jsonl` to the checkpoint directory when one is configured.
pub fn run(manifest: &RunManifest) -> Result<StageOutcome> {
    manifest.validate()?;
    manifest.validate_paths()?;
    let labeled = read_corpus(manifest.paths.labeled.as_ref().unwrap())?;
    let dir = checkpoint_dir(manifest);
    let mut writer = match &dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join(format!("{}.log.jsonl", manifest.mode.name())))?))
        }
        None => None,
    };
    let mut sink = |r: &LogRecord| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };

    let outcome = if let Some(resume) = &manifest.paths.resume {
        resume_run(manifest, &Checkpoint::load(resume)?, &labeled, &mut sink)?
    } else if manifest.mode.is_distillation() {
        let teacher = Checkpoint::load(manifest.paths.teacher_checkpoint.as_ref().unwrap())?.parameters()?;
        let unlabeled = match &manifest.paths.unlabeled {
            Some(p) => Some(read_corpus(p)?.into_iter().map(|s| s.unlabeled()).collect::<Vec<_>>()),
            None => None,
        };
        distill_with_sink(manifest, &teacher, &labeled, unlabeled.as_deref(), &mut sink)?
    } else {
        train_from_scratch(manifest, &labeled, &mut sink)?
    };
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(d) = &dir {
        outcome.checkpoint.save(d.join(format!("{}.ckpt", manifest.mode.name())))?;
    }
    Ok(outcome)
}

/// Continues a single labeled stage from a session checkpoint.
fn resume_run(
    manifest: &RunManifest,
    ckpt: &Checkpoint,
    labeled: &[MixtureSample],
    sink: LogSink<'_>,
) -> Result<StageOutcome> {
    let session = Session::resume(ckpt)?;
    let data = prepare(manifest, labeled, true)?;
    if session.objective.needs_teacher() {
        let teacher = Checkpoint::load(
            manifest
                .paths
                .teacher_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("resuming distillation requires paths.teacher_checkpoint".into()))?,
        )?
        .parameters()?;
        let spec = layer_map_spec(manifest, &session.model.config, &teacher.config)?;
        let ctx = TeacherContext {
            params: &teacher,
            layer_map: &spec,
        };
        run_stage(session, &data, Some(ctx), Objective::Pit, sink)
    } else {
        run_stage(session, &data, None, Objective::Pit, sink)
    }
}
