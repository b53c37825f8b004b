//! Joint-training reference: one model fit to the concatenation of every
//! task's training data. Not a continual method at all, which is exactly why
//! it lower-bounds the sequential ones.

use crate::data::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;

use super::{
    group_counts, train_epochs, BatchRule, ContinualMethod, Hyperparams, TaskRecord,
};

pub(crate) struct ReplayAll;

impl ContinualMethod for ReplayAll {
    fn name(&self) -> &'static str {
        "replay-all"
    }

    fn joint(&self) -> bool {
        true
    }

    /// Called once with the concatenated data as "task 1"; the sequence
    /// runner is responsible for the concatenation.
    fn train_task(
        &self,
        model: &mut MlpModel,
        task: &LabeledFeatureSet,
        task_index: u32,
        records: &[TaskRecord],
        params: &Hyperparams,
        seed: u64,
    ) -> Result<TaskRecord> {
        if task_index != 1 || !records.is_empty() {
            return Err(Error::domain(
                "joint training runs exactly once, as task 1 with no history",
            ));
        }
        let metrics = train_epochs(model, task, params, BatchRule::Plain, task_index, seed)?;
        model.snap_f32();
        let mut record = TaskRecord::bare(task_index, metrics);
        record.group_counts = group_counts(task, &params.blend);
        Ok(record)
    }
}
