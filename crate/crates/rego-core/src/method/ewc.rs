//! Quadratic-penalty baseline: each past task anchors the parameters where
//! its Fisher importance was high. The per-task penalty is
//! weight * fisher * (theta - star)^2, summed over past tasks; its gradient
//! joins the batch gradient before the optimizer step.

use crate::data::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::region::estimate_fim_combined;

use super::finetune::check_position;
use super::{
    group_counts, train_epochs, BatchRule, ContinualMethod, Hyperparams, PenaltyTerm, TaskRecord,
};

pub(crate) struct Ewc;

impl ContinualMethod for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
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
        let metrics = if records.is_empty() {
            train_epochs(model, task, params, BatchRule::Plain, task_index, seed)?
        } else {
            let terms: Vec<PenaltyTerm> = records
                .iter()
                .map(|r| {
                    match (&r.fisher, &r.star) {
                        (Some(fisher), Some(star)) => Ok(PenaltyTerm { fisher, star }),
                        _ => Err(Error::domain(format!(
                            "task {} record carries no penalty anchor",
                            r.task_index
                        ))),
                    }
                })
                .collect::<Result<_>>()?;
            train_epochs(
                model,
                task,
                params,
                BatchRule::Penalty {
                    terms,
                    weight: params.ewc_lambda,
                },
                task_index,
                seed,
            )?
        };
        model.snap_f32();
        let mut fisher = estimate_fim_combined(model, task)?.values;
        fisher.snap_f32();
        Ok(TaskRecord {
            task_index,
            regions: None,
            avg_gradient: None,
            fisher: Some(fisher),
            // Post-snap parameters, so the archive equals the live value.
            star: Some(model.params()),
            group_counts: group_counts(task, &params.blend),
            checkpoint: None,
            metrics,
        })
    }
}
