//! The region-based family: full method, its three ablations (via the flag
//! combinations registered in the parent module), and the all-orthogonal
//! baseline.
//!
//! Task 1 trains plain. From task 2 on, the archived per-task average
//! gradients form the projection reference and the archived region matrices
//! merge (optionally through the forgetting mask) into the region map that
//! steers each batch's composed update. After training, the post-task
//! parameters are probed for Fisher importance, localized at the alpha
//! percentile, and archived together with the task-average gradient.

use crate::data::LabeledFeatureSet;
use crate::error::Result;
use crate::mlp::{GradientSet, MlpModel};
use crate::region::{
    compose_regions, ebbinghaus_mask, estimate_fim, estimate_fim_combined, localize, localize_as,
    memory_matrix, merge_history, EbbinghausMask, LabelGroup, RegionMatrix,
};

use super::finetune::check_position;
use super::{
    group_counts, reference_from_records, region_history, task_average_gradient, train_epochs,
    BatchRule, ContinualMethod, Hyperparams, TaskMetrics, TaskRecord,
};

pub(crate) struct Rego {
    pub(crate) name: &'static str,
    /// Expire long-unused importance via the decay mask; off = merge all.
    pub(crate) forgetting_mask: bool,
    /// Localize importance per label group; off = one class-agnostic map
    /// whose important entries all take the orthogonal rule.
    pub(crate) per_group_regions: bool,
    /// Ignore regions at composition time and orthogonalize every entry.
    pub(crate) orthogonal_everywhere: bool,
}

impl Rego {
    fn constrained_training(
        &self,
        model: &mut MlpModel,
        task: &LabeledFeatureSet,
        task_index: u32,
        records: &[TaskRecord],
        params: &Hyperparams,
        seed: u64,
    ) -> Result<TaskMetrics> {
        let reference = reference_from_records(records, params, task_index)?;
        let history = region_history(records, task_index)?;
        let mask = if self.forgetting_mask {
            let m = memory_matrix(&history, task_index as usize, params.decay)?;
            ebbinghaus_mask(&m, params.gamma)?
        } else {
            EbbinghausMask::all_ones(&GradientSet::zeros_like(model), params.gamma)
        };
        let merged = merge_history(&history, &mask)?;
        train_epochs(
            model,
            task,
            params,
            BatchRule::Compose {
                reference: &reference,
                regions: &merged,
                orthogonal_everywhere: self.orthogonal_everywhere,
            },
            task_index,
            seed,
        )
    }

    /// Post-task importance analysis at the just-trained parameters.
    fn localize_regions(
        &self,
        model: &MlpModel,
        task: &LabeledFeatureSet,
        task_index: u32,
        params: &Hyperparams,
    ) -> Result<RegionMatrix> {
        if self.per_group_regions {
            let diverse = localize(
                &estimate_fim(model, task, &params.blend, LabelGroup::Diverse)?,
                params.alpha,
                params.scope,
            )?;
            let stable = localize(
                &estimate_fim(model, task, &params.blend, LabelGroup::Stable)?,
                params.alpha,
                params.scope,
            )?;
            compose_regions(&diverse, &stable, task_index)
        } else {
            // One undivided importance map; important entries get the
            // orthogonal region, the rest stay free.
            let combined = estimate_fim_combined(model, task)?;
            let loc = localize_as(&combined, LabelGroup::Diverse, params.alpha, params.scope)?;
            Ok(RegionMatrix {
                labels: loc.labels,
                task_index,
            })
        }
    }
}

impl ContinualMethod for Rego {
    fn name(&self) -> &'static str {
        self.name
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
            self.constrained_training(model, task, task_index, records, params, seed)?
        };
        model.snap_f32();
        let regions = self.localize_regions(model, task, task_index, params)?;
        let mut avg = task_average_gradient(model, task, params.batch_size)?;
        avg.snap_f32();
        Ok(TaskRecord {
            task_index,
            regions: Some(regions),
            avg_gradient: Some(avg),
            fisher: None,
            star: None,
            group_counts: group_counts(task, &params.blend),
            checkpoint: None,
            metrics,
        })
    }
}

/// Orthogonal-everything baseline: past-gradient memory as in the region
/// methods, but a uniform all-orthogonal region map and no importance
/// analysis at all.
pub(crate) struct OrthoAll;

impl ContinualMethod for OrthoAll {
    fn name(&self) -> &'static str {
        "ortho-all"
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
        let uniform = RegionMatrix::uniform(&GradientSet::zeros_like(model), 2, task_index);
        let metrics = if records.is_empty() {
            train_epochs(model, task, params, BatchRule::Plain, task_index, seed)?
        } else {
            let reference = reference_from_records(records, params, task_index)?;
            train_epochs(
                model,
                task,
                params,
                BatchRule::Compose {
                    reference: &reference,
                    regions: &uniform,
                    orthogonal_everywhere: false,
                },
                task_index,
                seed,
            )?
        };
        model.snap_f32();
        let mut avg = task_average_gradient(model, task, params.batch_size)?;
        avg.snap_f32();
        Ok(TaskRecord {
            task_index,
            regions: Some(uniform),
            avg_gradient: Some(avg),
            fisher: None,
            star: None,
            group_counts: group_counts(task, &params.blend),
            checkpoint: None,
            metrics,
        })
    }
}
