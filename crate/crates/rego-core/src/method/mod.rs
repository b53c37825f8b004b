//! The continual-learning method family behind one strategy interface.
//!
//! Every method is a stateless singleton selected by name from [`registry`].
//! Cross-task state lives entirely in the caller's [`TaskRecord`] list, so a
//! sequence can be resumed from archived records with no hidden carry-over.
//! All methods share one batch engine; they differ only in the per-batch
//! update rule and in which post-task artifacts they archive.

use crate::data::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::mlp::{
    apply_update, loss_and_gradient, Activation, GradientSet, MlpModel, OptimizerKind,
    OptimizerState,
};
use crate::region::{DecayConvention, PercentileScope, RegionMatrix};
use crate::surgery::{blend_ratio, compose_update_with, BlendConfig};
use crate::tensor::Rng;

mod ewc;
mod finetune;
mod rego;
mod replay;

/// Shared knobs for model, optimizer, and the region machinery. Names with a
/// paper meaning keep their roles: alpha is the importance percentile, gamma
/// the forgetting threshold, and the learning rate drives Adam by default.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ewc_lambda: f64,
    pub optimizer: OptimizerKind,
    pub activation: Activation,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub scope: PercentileScope,
    pub decay: DecayConvention,
    /// Weight archived gradients by recency instead of uniformly when
    /// building the projection reference.
    pub decayed_reference: bool,
    pub blend: BlendConfig,
}

impl Default for Hyperparams {
    fn default() -> Hyperparams {
        Hyperparams {
            alpha: 0.75,
            gamma: 0.1,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 8,
            ewc_lambda: 100.0,
            optimizer: OptimizerKind::Adam,
            activation: Activation::Relu,
            hidden: vec![128, 128, 128, 128],
            scope: PercentileScope::PerBlock,
            decay: DecayConvention::AgeBased,
            decayed_reference: false,
            blend: BlendConfig::binary(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 || self.epochs > u16::MAX as usize {
            return Err(Error::config(format!(
                "epochs {} must be in 1..={}",
                self.epochs,
                u16::MAX
            )));
        }
        if !(self.ewc_lambda >= 0.0 && self.ewc_lambda.is_finite()) {
            return Err(Error::config(format!(
                "penalty weight {} must be >= 0 and finite",
                self.ewc_lambda
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden widths must be nonempty and positive"));
        }
        Ok(())
    }

    /// Full layer size chain for the given data dimensions.
    pub fn layer_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// A method chosen by name plus the hyperparameters it runs under.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub params: Hyperparams,
}

impl MethodSpec {
    pub fn new(name: &str, params: Hyperparams) -> Result<MethodSpec> {
        lookup(name)?;
        params.validate()?;
        Ok(MethodSpec {
            name: name.to_string(),
            params,
        })
    }

    pub fn method(&self) -> &'static dyn ContinualMethod {
        lookup(&self.name).expect("validated at construction")
    }
}

/// Per-task training counters and summary numbers. The surgery counters let
/// tests assert the one-decomposition-per-batch discipline directly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskMetrics {
    pub epochs: u32,
    pub batches: u64,
    /// Batches that went through the projection/orthogonal decomposition.
    pub decompositions: u64,
    /// Batches for which a stable-fraction blend ratio was computed.
    pub blend_ratios: u64,
    /// Batches whose update came out of the region composition rule.
    pub compositions: u64,
    /// Per-sample mean training loss over the final epoch.
    pub final_epoch_loss: f64,
}

/// Everything one completed task leaves behind. Optional fields exist only
/// for the methods that need them; persistent numeric state is stored at
/// 32-bit precision so archived and in-memory values are interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_index: u32,
    /// Post-task region matrix (region-based methods).
    pub regions: Option<RegionMatrix>,
    /// Archived task-average gradient at the post-task parameters.
    pub avg_gradient: Option<GradientSet>,
    /// Class-summed squared-gradient importance (penalty baseline).
    pub fisher: Option<GradientSet>,
    /// Post-task parameters the penalty anchors to.
    pub star: Option<GradientSet>,
    /// Sample counts for the (diverse, stable) label groups.
    pub group_counts: (usize, usize),
    /// File stem of the checkpoint this record's artifacts live under, when
    /// the run persists to disk.
    pub checkpoint: Option<String>,
    pub metrics: TaskMetrics,
}

impl TaskRecord {
    pub fn bare(task_index: u32, metrics: TaskMetrics) -> TaskRecord {
        TaskRecord {
            task_index,
            regions: None,
            avg_gradient: None,
            fisher: None,
            star: None,
            group_counts: (0, 0),
            checkpoint: None,
            metrics,
        }
    }
}

/// One continual-learning strategy. Implementations are stateless; the
/// record list is the only memory between tasks.
pub trait ContinualMethod: Sync {
    fn name(&self) -> &'static str;

    /// True for methods that train once on the concatenation of all task
    /// data instead of sequentially.
    fn joint(&self) -> bool {
        false
    }

    /// Trains the model in place on one task and returns its record.
    /// `task_index` counts from 1; `records` holds tasks 1..task_index-1 in
    /// order. The first task must reduce to plain training for every method.
    fn train_task(
        &self,
        model: &mut MlpModel,
        task: &LabeledFeatureSet,
        task_index: u32,
        records: &[TaskRecord],
        params: &Hyperparams,
        seed: u64,
    ) -> Result<TaskRecord>;
}

/// All method names, in the table order reports use.
pub const METHOD_NAMES: [&str; 8] = [
    "rego",
    "rego-no-efm",
    "rego-no-irl",
    "rego-no-rao",
    "finetune",
    "ortho-all",
    "ewc",
    "replay-all",
];

static REGO: rego::Rego = rego::Rego {
    name: "rego",
    forgetting_mask: true,
    per_group_regions: true,
    orthogonal_everywhere: false,
};
static REGO_NO_EFM: rego::Rego = rego::Rego {
    name: "rego-no-efm",
    forgetting_mask: false,
    per_group_regions: true,
    orthogonal_everywhere: false,
};
static REGO_NO_IRL: rego::Rego = rego::Rego {
    name: "rego-no-irl",
    forgetting_mask: true,
    per_group_regions: false,
    orthogonal_everywhere: false,
};
static REGO_NO_RAO: rego::Rego = rego::Rego {
    name: "rego-no-rao",
    forgetting_mask: true,
    per_group_regions: true,
    orthogonal_everywhere: true,
};
static FINETUNE: finetune::Finetune = finetune::Finetune;
static ORTHO_ALL: rego::OrthoAll = rego::OrthoAll;
static EWC: ewc::Ewc = ewc::Ewc;
static REPLAY_ALL: replay::ReplayAll = replay::ReplayAll;

static METHODS: [&dyn ContinualMethod; 8] = [
    &REGO,
    &REGO_NO_EFM,
    &REGO_NO_IRL,
    &REGO_NO_RAO,
    &FINETUNE,
    &ORTHO_ALL,
    &EWC,
    &REPLAY_ALL,
];

/// The full strategy registry, in `METHOD_NAMES` order.
pub fn registry() -> &'static [&'static dyn ContinualMethod] {
    &METHODS
}

pub fn lookup(name: &str) -> Result<&'static dyn ContinualMethod> {
    METHODS
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown method {name:?}; expected one of {}",
                METHOD_NAMES.join(", ")
            ))
        })
}

/// Anchor of one quadratic penalty: stay near `star` where `fisher` is large.
pub struct PenaltyTerm<'a> {
    pub fisher: &'a GradientSet,
    pub star: &'a GradientSet,
}

/// What happens to the raw batch gradient before the optimizer consumes it.
pub enum BatchRule<'a> {
    /// The gradient passes through untouched.
    Plain,
    /// Region-wise composition against a projection reference. With
    /// `orthogonal_everywhere` the region labels are ignored and every entry
    /// takes the orthogonal residual.
    Compose {
        reference: &'a GradientSet,
        regions: &'a RegionMatrix,
        orthogonal_everywhere: bool,
    },
    /// Quadratic pull toward each term's anchor, added to the gradient.
    Penalty {
        terms: Vec<PenaltyTerm<'a>>,
        weight: f64,
    },
}

pub(crate) fn shuffle_stream(seed: u64, task_index: u32, epoch: usize) -> Rng {
    // Disjoint by construction: epochs are validated to fit in 16 bits.
    let tag = 0x5348_5546_u64 << 32 | u64::from(task_index) << 16 | epoch as u64;
    Rng::stream(seed, tag)
}

/// Runs the configured epochs over the task with one update rule. The
/// optimizer starts fresh: its state is per-task, so a sequence resumed from
/// archives at a task boundary continues bitwise-identically.
pub(crate) fn train_epochs(
    model: &mut MlpModel,
    data: &LabeledFeatureSet,
    params: &Hyperparams,
    rule: BatchRule,
    task_index: u32,
    seed: u64,
) -> Result<TaskMetrics> {
    if data.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let mut opt = OptimizerState::new(params.optimizer, params.learning_rate);
    let mut metrics = TaskMetrics::default();
    let n = data.len();
    for epoch in 0..params.epochs {
        let mut order = shuffle_stream(seed, task_index, epoch).permutation(n);
        let mut epoch_loss = 0.0;
        while !order.is_empty() {
            let take = params.batch_size.min(order.len());
            let rows: Vec<usize> = order.drain(..take).collect();
            let (batch, labels) = data.gather(&rows);
            let (loss, g) = loss_and_gradient(model, &batch, &labels)?;
            epoch_loss += loss * rows.len() as f64;
            let w = match &rule {
                BatchRule::Plain => g,
                BatchRule::Compose {
                    reference,
                    regions,
                    orthogonal_everywhere,
                } => {
                    let beta = blend_ratio(&labels, &params.blend)?;
                    metrics.blend_ratios += 1;
                    metrics.decompositions += 1;
                    metrics.compositions += 1;
                    if *orthogonal_everywhere {
                        let projected = crate::surgery::project_onto(&g, reference)?;
                        g.zip_map(&projected, |gi, pi| gi - pi)?
                    } else {
                        compose_update_with(&g, reference, regions, beta)?
                    }
                }
                BatchRule::Penalty { terms, weight } => {
                    let theta = model.params();
                    let mut w = g;
                    for term in terms {
                        // d/dtheta of weight * fisher * (theta - star)^2.
                        let pull = theta.zip_map(term.star, |t, s| t - s)?;
                        let pull = pull.zip_map(term.fisher, |d, f| 2.0 * weight * f * d)?;
                        w.add_assign(&pull)?;
                    }
                    w
                }
            };
            apply_update(model, &w, &mut opt)?;
            metrics.batches += 1;
        }
        metrics.epochs += 1;
        metrics.final_epoch_loss = epoch_loss / n as f64;
    }
    Ok(metrics)
}

/// Average gradient over the task at the current (post-task) parameters:
/// fixed dataset-order batches, summed and divided by the batch count.
pub(crate) fn task_average_gradient(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    batch_size: usize,
) -> Result<GradientSet> {
    if data.is_empty() {
        return Err(Error::domain("average gradient of an empty set"));
    }
    let mut sum = GradientSet::zeros_like(model);
    let mut batches = 0u64;
    let mut start = 0;
    while start < data.len() {
        let rows: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let (batch, labels) = data.gather(&rows);
        let (_, g) = loss_and_gradient(model, &batch, &labels)?;
        sum.add_assign(&g)?;
        batches += 1;
        start += rows.len();
    }
    sum.scale(1.0 / batches as f64);
    Ok(sum)
}

/// (diverse, stable) sample counts under the grouping.
pub(crate) fn group_counts(data: &LabeledFeatureSet, blend: &BlendConfig) -> (usize, usize) {
    let stable = data
        .labels()
        .iter()
        .filter(|&&l| blend.is_stable(l))
        .count();
    (data.len() - stable, stable)
}

/// Rebuilds the projection reference from archived per-task averages.
pub(crate) fn reference_from_records(
    records: &[TaskRecord],
    params: &Hyperparams,
    task_index: u32,
) -> Result<GradientSet> {
    let averages: Vec<GradientSet> = records
        .iter()
        .map(|r| {
            r.avg_gradient.clone().ok_or_else(|| {
                Error::domain(format!(
                    "task {} record carries no archived gradient",
                    r.task_index
                ))
            })
        })
        .collect::<Result<_>>()?;
    let memory = crate::surgery::GradientMemory::from_averages(averages)?;
    if params.decayed_reference {
        memory.decayed_reference(task_index as usize)
    } else {
        Ok(memory
            .reference()
            .expect("memory built from nonempty records")
            .clone())
    }
}

/// Orders and validates the archived region history for tasks 1..k-1.
pub(crate) fn region_history(records: &[TaskRecord], task_index: u32) -> Result<Vec<RegionMatrix>> {
    let mut history: Vec<RegionMatrix> = records
        .iter()
        .map(|r| {
            r.regions.clone().ok_or_else(|| {
                Error::domain(format!(
                    "task {} record carries no region matrix",
                    r.task_index
                ))
            })
        })
        .collect::<Result<_>>()?;
    history.sort_by_key(|r| r.task_index);
    for (i, r) in history.iter().enumerate() {
        if r.task_index != i as u32 + 1 {
            return Err(Error::domain(format!(
                "region history is not contiguous at task {}",
                r.task_index
            )));
        }
    }
    if history.len() != task_index as usize - 1 {
        return Err(Error::domain(format!(
            "task {task_index} needs {} past records, found {}",
            task_index - 1,
            history.len()
        )));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_the_name_list() {
        let names: Vec<&str> = registry().iter().map(|m| m.name()).collect();
        assert_eq!(names, METHOD_NAMES);
        for name in METHOD_NAMES {
            assert_eq!(lookup(name).unwrap().name(), name);
        }
        assert!(matches!(lookup("sgd"), Err(Error::Config(_))));
        // Exactly one method trains jointly.
        let joint: Vec<&str> = registry()
            .iter()
            .filter(|m| m.joint())
            .map(|m| m.name())
            .collect();
        assert_eq!(joint, ["replay-all"]);
    }

    #[test]
    fn default_hyperparams_are_the_published_ones() {
        let p = Hyperparams::default();
        assert_eq!(p.alpha, 0.75);
        assert_eq!(p.gamma, 0.1);
        assert_eq!(p.learning_rate, 1e-4);
        assert_eq!(p.batch_size, 32);
        assert_eq!(p.optimizer, OptimizerKind::Adam);
        assert_eq!(p.layer_dims(32, 2), vec![32, 128, 128, 128, 128, 2]);
        p.validate().unwrap();
    }

    #[test]
    fn hyperparam_validation_rejects_bad_values() {
        let ok = Hyperparams::default();
        for bad in [
            Hyperparams { alpha: 1.5, ..ok.clone() },
            Hyperparams { gamma: -0.1, ..ok.clone() },
            Hyperparams { learning_rate: 0.0, ..ok.clone() },
            Hyperparams { batch_size: 0, ..ok.clone() },
            Hyperparams { epochs: 0, ..ok.clone() },
            Hyperparams { epochs: 1 << 17, ..ok.clone() },
            Hyperparams { ewc_lambda: f64::NAN, ..ok.clone() },
            Hyperparams { hidden: vec![], ..ok.clone() },
            Hyperparams { hidden: vec![8, 0], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(MethodSpec::new("nope", ok.clone()).is_err());
        assert!(MethodSpec::new("rego", ok).is_ok());
    }

    #[test]
    fn shuffle_streams_differ_by_task_and_epoch() {
        let a = shuffle_stream(1, 1, 0).permutation(16);
        let b = shuffle_stream(1, 1, 1).permutation(16);
        let c = shuffle_stream(1, 2, 0).permutation(16);
        let again = shuffle_stream(1, 1, 0).permutation(16);
        assert_eq!(a, again);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
