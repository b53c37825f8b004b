//! Sequence orchestration: trains a method across the task list, archives
//! per-task artifacts, evaluates the final model on every task, and can
//! resume an interrupted run from its directory with a bitwise-identical
//! continuation.
//!
//! Run directory layout (all files deterministic for a config + seed):
//!
//! ```text
//! manifest.txt      canonical configuration (also the config-hash input)
//! records.csv       one row per completed task: counts, counters, loss
//! taskNN.rgmw       post-task model checkpoint (32-bit parameters)
//! taskNN.rgrm       post-task region matrix, for methods that build one
//! memory.rggm       archived per-task average gradients, in task order
//! fisher.rggm       archived per-task importance diagonals (penalty method)
//! model.rgmw        final model
//! report.csv        per-task EER row for this run's method
//! eval_matrix.csv   optional: every checkpoint evaluated on every task
//! FAILED            only on error: the message the run died with
//! ```

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{LabeledFeatureSet, TaskData};
use crate::error::{Error, Result};
use crate::method::{lookup, ContinualMethod, TaskMetrics, TaskRecord};
use crate::metrics::{real_mass_scores, EerMode, ScoreSet, SequenceReport};
use crate::mlp::{build_model, forward, read_checkpoint, write_checkpoint, MlpModel};
use crate::region::{read_regions, write_regions};
use crate::surgery::{
    read_gradient_memory, write_gradient_memory, BlendConfig, GradientMemory,
};
use crate::tensor::Rng;

const TAG_MODEL_INIT: u64 = 0x4d_4f44_494e;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RECORDS_FILE: &str = "records.csv";
pub const MEMORY_FILE: &str = "memory.rggm";
pub const FISHER_FILE: &str = "fisher.rggm";
pub const MODEL_FILE: &str = "model.rgmw";
pub const REPORT_FILE: &str = "report.csv";
pub const EVAL_MATRIX_FILE: &str = "eval_matrix.csv";
pub const FAILURE_FILE: &str = "FAILED";

fn task_stem(task_index: u32) -> String {
    format!("task{task_index:02}")
}

/// Deterministic starting model for a config + seed; parameters pass through
/// 32-bit precision immediately so a freshly built model equals its own
/// checkpoint round-trip.
pub fn initial_model(config: &RunConfig, input_dim: usize, classes: usize) -> Result<MlpModel> {
    let dims = config.method.params.layer_dims(input_dim, classes);
    let mut model = build_model(&dims, &mut Rng::stream(config.seed, TAG_MODEL_INIT))?
        .with_activation(config.method.params.activation);
    model.snap_f32();
    Ok(model)
}

/// Probability-of-real scores for one test set.
pub fn score_set(
    model: &MlpModel,
    test: &LabeledFeatureSet,
    blend: &BlendConfig,
) -> Result<ScoreSet> {
    let logits = forward(model, test.features())?;
    let scores = real_mass_scores(&logits, blend.stable_labels())?;
    let real: Vec<bool> = test.labels().iter().map(|&l| blend.is_stable(l)).collect();
    ScoreSet::new(scores, real)
}

/// Per-task EER of one model over the given test sets. Read-only on the
/// model; tasks are scored on worker threads and reduced in task order.
pub fn evaluate_all(
    model: &MlpModel,
    tests: &[&LabeledFeatureSet],
    blend: &BlendConfig,
    mode: EerMode,
) -> Result<Vec<f64>> {
    if tests.is_empty() {
        return Err(Error::domain("no test sets to evaluate"));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = tests
            .iter()
            .map(|test| scope.spawn(move || score_set(model, test, blend)?.eer_mode(mode)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// A sequence run in progress. Construct with [`SequenceRunner::new`] or
/// [`SequenceRunner::resume`], then call [`SequenceRunner::step`] until it
/// returns `false` and [`SequenceRunner::finalize`] for the report.
pub struct SequenceRunner {
    config: RunConfig,
    method: &'static dyn ContinualMethod,
    tasks: Vec<TaskData>,
    model: MlpModel,
    records: Vec<TaskRecord>,
    /// Post-task model snapshots, kept for the evaluation-matrix mode.
    checkpoints: Vec<MlpModel>,
    out_dir: Option<PathBuf>,
}

impl SequenceRunner {
    pub fn new(
        config: RunConfig,
        tasks: Vec<TaskData>,
        out_dir: Option<&Path>,
    ) -> Result<SequenceRunner> {
        let method = Self::validate(&config, &tasks)?;
        let model = initial_model(
            &config,
            tasks[0].train.dim(),
            usize::from(tasks[0].train.label_count()),
        )?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            if dir.join(MANIFEST_FILE).exists() {
                return Err(Error::config(format!(
                    "{} already holds a run; resume it or pick a fresh directory",
                    dir.display()
                )));
            }
            std::fs::write(dir.join(MANIFEST_FILE), config.to_canonical_string())?;
        }
        let runner = SequenceRunner {
            config,
            method,
            tasks,
            model,
            records: Vec::new(),
            checkpoints: Vec::new(),
            out_dir: out_dir.map(Path::to_path_buf),
        };
        runner.persist_records()?;
        Ok(runner)
    }

    /// Reopens a run directory and rebuilds the exact in-memory state the
    /// original process had after its last completed task.
    pub fn resume(config: RunConfig, tasks: Vec<TaskData>, dir: &Path) -> Result<SequenceRunner> {
        let method = Self::validate(&config, &tasks)?;
        let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::config(format!("no resumable run in {}: {e}", dir.display())))?;
        if manifest != config.to_canonical_string() {
            return Err(Error::config(
                "run directory was created under a different configuration",
            ));
        }
        let rows = parse_records(&std::fs::read_to_string(dir.join(RECORDS_FILE))?)?;
        let template = initial_model(
            &config,
            tasks[0].train.dim(),
            usize::from(tasks[0].train.label_count()),
        )?;
        let shapes = template.block_shapes();
        let averages = {
            let path = dir.join(MEMORY_FILE);
            if path.exists() {
                read_gradient_memory(&path, &shapes)?.averages().to_vec()
            } else {
                Vec::new()
            }
        };
        let fishers = {
            let path = dir.join(FISHER_FILE);
            if path.exists() {
                read_gradient_memory(&path, &shapes)?.averages().to_vec()
            } else {
                Vec::new()
            }
        };
        if !averages.is_empty() && averages.len() != rows.len() {
            return Err(Error::config(format!(
                "{} archived gradients for {} records",
                averages.len(),
                rows.len()
            )));
        }
        if !fishers.is_empty() && fishers.len() != rows.len() {
            return Err(Error::config(format!(
                "{} archived importance diagonals for {} records",
                fishers.len(),
                rows.len()
            )));
        }
        let mut records = Vec::with_capacity(rows.len());
        let mut checkpoints = Vec::new();
        let mut model = template;
        for (i, row) in rows.into_iter().enumerate() {
            let stem = row.checkpoint.clone();
            let checkpoint_model = read_checkpoint(&dir.join(format!("{stem}.rgmw")))?
                .with_activation(config.method.params.activation);
            let regions_path = dir.join(format!("{stem}.rgrm"));
            let regions = if regions_path.exists() {
                Some(read_regions(&regions_path)?)
            } else {
                None
            };
            let record = TaskRecord {
                task_index: row.task_index,
                regions,
                avg_gradient: averages.get(i).cloned(),
                fisher: fishers.get(i).cloned(),
                star: if fishers.is_empty() {
                    None
                } else {
                    Some(checkpoint_model.params())
                },
                group_counts: row.group_counts,
                checkpoint: Some(stem),
                metrics: row.metrics,
            };
            records.push(record);
            if config.eval_matrix {
                checkpoints.push(checkpoint_model.clone());
            }
            model = checkpoint_model;
        }
        Ok(SequenceRunner {
            config,
            method,
            tasks,
            model,
            records,
            checkpoints,
            out_dir: Some(dir.to_path_buf()),
        })
    }

    fn validate(config: &RunConfig, tasks: &[TaskData]) -> Result<&'static dyn ContinualMethod> {
        config.method.params.validate()?;
        let method = lookup(&config.method.name)?;
        let first = tasks
            .first()
            .ok_or_else(|| Error::domain("a sequence needs at least one task"))?;
        for t in tasks {
            if t.train.dim() != first.train.dim()
                || t.test.dim() != first.train.dim()
                || t.train.label_count() != first.train.label_count()
                || t.test.label_count() != first.train.label_count()
            {
                return Err(Error::dimension("tasks disagree on dim or label count"));
            }
        }
        config
            .method
            .params
            .blend
            .validate_covers(first.train.label_count())?;
        Ok(method)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn completed(&self) -> bool {
        if self.method.joint() {
            !self.records.is_empty()
        } else {
            self.records.len() >= self.tasks.len()
        }
    }

    /// Trains the next task and archives its artifacts. Returns `false` once
    /// every task is done.
    pub fn step(&mut self) -> Result<bool> {
        if self.completed() {
            return Ok(false);
        }
        let task_index = self.records.len() as u32 + 1;
        let mut record = if self.method.joint() {
            let sets: Vec<&LabeledFeatureSet> = self.tasks.iter().map(|t| &t.train).collect();
            let joint = LabeledFeatureSet::concat(&sets)?;
            self.method.train_task(
                &mut self.model,
                &joint,
                task_index,
                &self.records,
                &self.config.method.params,
                self.config.seed,
            )?
        } else {
            self.method.train_task(
                &mut self.model,
                &self.tasks[task_index as usize - 1].train,
                task_index,
                &self.records,
                &self.config.method.params,
                self.config.seed,
            )?
        };
        record.checkpoint = Some(task_stem(task_index));
        if self.config.eval_matrix {
            self.checkpoints.push(self.model.clone());
        }
        if let Some(dir) = self.out_dir.clone() {
            let stem = task_stem(task_index);
            write_checkpoint(&self.model, &dir.join(format!("{stem}.rgmw")))?;
            if let Some(regions) = &record.regions {
                write_regions(regions, &dir.join(format!("{stem}.rgrm")))?;
            }
            self.records.push(record);
            self.persist_gradient_archives(&dir)?;
            self.persist_records()?;
        } else {
            self.records.push(record);
        }
        Ok(true)
    }

    fn persist_gradient_archives(&self, dir: &Path) -> Result<()> {
        let averages: Vec<_> = self
            .records
            .iter()
            .filter_map(|r| r.avg_gradient.clone())
            .collect();
        if !averages.is_empty() {
            write_gradient_memory(
                &GradientMemory::from_averages(averages)?,
                &dir.join(MEMORY_FILE),
            )?;
        }
        let fishers: Vec<_> = self
            .records
            .iter()
            .filter_map(|r| r.fisher.clone())
            .collect();
        if !fishers.is_empty() {
            write_gradient_memory(
                &GradientMemory::from_averages(fishers)?,
                &dir.join(FISHER_FILE),
            )?;
        }
        Ok(())
    }

    fn persist_records(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            std::fs::write(dir.join(RECORDS_FILE), render_records(&self.records))?;
        }
        Ok(())
    }

    /// Evaluates the final model on every task's test set and writes the
    /// remaining artifacts.
    pub fn finalize(&mut self) -> Result<SequenceReport> {
        if !self.completed() {
            return Err(Error::domain("finalize called before the last task"));
        }
        let blend = &self.config.method.params.blend;
        let tests: Vec<&LabeledFeatureSet> = self.tasks.iter().map(|t| &t.test).collect();
        let eers = evaluate_all(&self.model, &tests, blend, self.config.eer_mode)?;
        let mut report = SequenceReport::summarize(
            SequenceReport::experience_columns(tests.len()),
            vec![(self.config.method.name.clone(), eers)],
        )?;
        report.seed = Some(self.config.seed);
        report.config_hash = Some(self.config.hash());
        if let Some(dir) = &self.out_dir {
            std::fs::write(dir.join(REPORT_FILE), report.to_csv())?;
            write_checkpoint(&self.model, &dir.join(MODEL_FILE))?;
        }
        if self.config.eval_matrix {
            let text = self.eval_matrix_csv(&tests, blend)?;
            if let Some(dir) = &self.out_dir {
                std::fs::write(dir.join(EVAL_MATRIX_FILE), text)?;
            }
        }
        Ok(report)
    }

    /// One row per completed task: that checkpoint evaluated on every task.
    fn eval_matrix_csv(
        &self,
        tests: &[&LabeledFeatureSet],
        blend: &BlendConfig,
    ) -> Result<String> {
        let mut text = String::from("after_task");
        for i in 1..=tests.len() {
            text.push_str(&format!(",exp{i}"));
        }
        text.push_str(",avg\n");
        for (i, model) in self.checkpoints.iter().enumerate() {
            let eers = evaluate_all(model, tests, blend, self.config.eer_mode)?;
            text.push_str(&(i + 1).to_string());
            for &e in &eers {
                text.push_str(&format!(",{:.2}", e * 100.0));
            }
            let avg = eers.iter().sum::<f64>() / eers.len() as f64;
            text.push_str(&format!(",{:.2}\n", avg * 100.0));
        }
        Ok(text)
    }
}

/// Runs a full sequence. On error with a run directory, the partial
/// artifacts stay on disk next to a failure marker holding the message.
pub fn run_sequence(
    config: RunConfig,
    tasks: Vec<TaskData>,
    out_dir: Option<&Path>,
) -> Result<SequenceReport> {
    let mut runner = SequenceRunner::new(config, tasks, out_dir)?;
    drive(&mut runner).map_err(|e| mark_failure(out_dir, e))
}

/// Continues an interrupted run to completion.
pub fn resume_sequence(
    config: RunConfig,
    tasks: Vec<TaskData>,
    dir: &Path,
) -> Result<SequenceReport> {
    let mut runner = SequenceRunner::resume(config, tasks, dir)?;
    drive(&mut runner).map_err(|e| mark_failure(Some(dir), e))
}

fn drive(runner: &mut SequenceRunner) -> Result<SequenceReport> {
    while runner.step()? {}
    runner.finalize()
}

fn mark_failure(out_dir: Option<&Path>, e: Error) -> Error {
    if let Some(dir) = out_dir {
        // Best effort: the marker must not mask the original error.
        let _ = std::fs::write(dir.join(FAILURE_FILE), format!("{e}\n"));
    }
    e
}

struct RecordRow {
    task_index: u32,
    group_counts: (usize, usize),
    metrics: TaskMetrics,
    checkpoint: String,
}

const RECORDS_HEADER: &str =
    "task,diverse,stable,epochs,batches,decompositions,blend_ratios,compositions,final_epoch_loss,checkpoint";

fn render_records(records: &[TaskRecord]) -> String {
    let mut text = String::from(RECORDS_HEADER);
    text.push('\n');
    for r in records {
        let m = &r.metrics;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.task_index,
            r.group_counts.0,
            r.group_counts.1,
            m.epochs,
            m.batches,
            m.decompositions,
            m.blend_ratios,
            m.compositions,
            m.final_epoch_loss,
            r.checkpoint.as_deref().unwrap_or(""),
        ));
    }
    text
}

fn parse_records(text: &str) -> Result<Vec<RecordRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORDS_HEADER => {}
        other => {
            return Err(Error::config(format!(
                "unrecognized record table header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::config(format!(
                "record row {} has {} fields",
                i + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::config(format!("bad record count {s:?}")))
        };
        rows.push(RecordRow {
            task_index: num(fields[0])? as u32,
            group_counts: (num(fields[1])? as usize, num(fields[2])? as usize),
            metrics: TaskMetrics {
                epochs: num(fields[3])? as u32,
                batches: num(fields[4])?,
                decompositions: num(fields[5])?,
                blend_ratios: num(fields[6])?,
                compositions: num(fields[7])?,
                final_epoch_loss: fields[8]
                    .parse()
                    .map_err(|_| Error::config(format!("bad loss value {:?}", fields[8])))?,
            },
            checkpoint: fields[9].to_string(),
        });
    }
    Ok(rows)
}
