use std::path::Path;

use serde::Serialize;

use super::optim::{lr_at, OptimConfig};
use crate::distill::{lambda_weight, ShiftSchedule};
use crate::error::{Error, Result};

/// Learning rate and shift weight at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub step: u64,
    pub lambda: f64,
    pub lr: f64,
}

/// Rows for steps `0, stride, 2 * stride, ..` and always the final step.
pub fn schedule_rows(optim: &OptimConfig, schedule: &ShiftSchedule, stride: u64) -> Result<Vec<ScheduleRow>> {
    optim.validate()?;
    schedule.validate()?;
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    let mut steps: Vec<u64> = (0..=optim.total_steps).step_by(stride as usize).collect();
    if steps.last() != Some(&optim.total_steps) {
        steps.push(optim.total_steps);
    }
    steps
        .into_iter()
        .map(|step| {
            Ok(ScheduleRow {
                step,
                lambda: lambda_weight(step as f64, schedule),
                lr: lr_at(step, optim)?,
            })
        })
        .collect()
}

pub fn write_schedule_csv(path: impl AsRef<Path>, rows: &[ScheduleRow]) -> Result<()> {
    write_schedule_csv_to(std::fs::File::create(path)?, rows)
}

/// `step,lambda,lr` table with a header row.
pub fn write_schedule_csv_to(out: impl std::io::Write, rows: &[ScheduleRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
