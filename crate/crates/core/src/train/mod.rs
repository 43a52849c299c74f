//! Optimization, training objectives and the distillation pipeline.

mod data;
mod objective;
mod optim;
mod pipeline;
mod schedule;
mod session;

pub use data::{prepare_example, prepare_examples, sample_batch, split_indices};
pub use objective::{
    batch_gradients, evaluate_loss, example_gradients, Example, Gradients, LossComponents, Objective,
    TeacherContext,
};
pub use optim::{lr_at, scaled_warmup, AdamW, OptimConfig, REFERENCE_TOTAL_STEPS, REFERENCE_WARMUP_STEPS};
pub use pipeline::{
    checkpoint_dir, distill, distill_stage1, distill_stage2, run, train_baseline, train_teacher, DataConfig,
    Mode, Paths, RunManifest, ScheduleConfig, StageOutcome, CHECKPOINT_DIR_ENV,
};
pub use schedule::{schedule_rows, write_schedule_csv, write_schedule_csv_to, ScheduleRow};
pub use session::{load_projections, LogRecord, Session};
