//! Plain sequential training: no memory, no constraints. The forgetting
//! baseline every other method is measured against.

use crate::data::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;

use super::{
    group_counts, train_epochs, BatchRule, ContinualMethod, Hyperparams, TaskRecord,
};

pub(crate) struct Finetune;

impl ContinualMethod for Finetune {
    fn name(&self) -> &'static str {
        "finetune"
    }

    fn train_task(
        &self,
        model: &mut MlpModel,
        task: &LabeledFeatureSet,
        task_index: u32,
        records: &[TaskRecord],
        params: &Hyperparams,
        seed: u64,
    ) -> Result<TaskRecord> {
        check_position(task_index, records)?;
        let metrics = train_epochs(model, task, params, BatchRule::Plain, task_index, seed)?;
        model.snap_f32();
        let mut record = TaskRecord::bare(task_index, metrics);
        record.group_counts = group_counts(task, &params.blend);
        Ok(record)
    }
}

/// Sequential methods require task k to arrive with exactly the records of
/// tasks 1..k-1.
pub(super) fn check_position(task_index: u32, records: &[TaskRecord]) -> Result<()> {
    if task_index == 0 {
        return Err(Error::domain("task indices count from 1"));
    }
    if records.len() != task_index as usize - 1 {
        return Err(Error::domain(format!(
            "task {task_index} arrived with {} past records",
            records.len()
        )));
    }
    Ok(())
}
