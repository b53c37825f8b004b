//! Labeled feature sets, the synthetic drifting-task generator, and dataset
//! serialization (binary and CSV).
//!
//! The generator models the continual detection setting directly: bona fide
//! samples come from one fixed, compact Gaussian cluster shared by every
//! task, while fake samples come from a task-specific Gaussian mixture whose
//! cluster directions wander further from their base placement as the drift
//! magnitude and the task index grow. Features are rounded through 32-bit
//! precision at generation time so a set equals its file round-trip exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmtio::{read_file, write_file, Reader, Writer};
use crate::tensor::{Matrix, Rng};

/// Feature rows with one small unsigned label per row.
/// Binary convention: label 0 is fake/diverse, label 1 is real/stable.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Matrix,
    labels: Vec<u8>,
    label_count: u16,
}

impl LabeledFeatureSet {
    pub fn new(features: Matrix, labels: Vec<u8>, label_count: u16) -> Result<LabeledFeatureSet> {
        if features.rows() != labels.len() {
            return Err(Error::dimension(format!(
                "{} feature rows with {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if label_count == 0 {
            return Err(Error::config("label count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| u16::from(l) >= label_count) {
            return Err(Error::domain(format!(
                "label {bad} outside the declared {label_count} classes"
            )));
        }
        Ok(LabeledFeatureSet {
            features,
            labels,
            label_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_count(&self) -> u16 {
        self.label_count
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Copies the given rows into a batch.
    pub fn gather(&self, rows: &[usize]) -> (Matrix, Vec<u8>) {
        let mut batch = Matrix::zeros(rows.len(), self.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            batch.row_mut(out).copy_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        (batch, labels)
    }

    /// Concatenates sets with identical dimensionality and label alphabet.
    pub fn concat(sets: &[&LabeledFeatureSet]) -> Result<LabeledFeatureSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::domain("concatenation of zero sets"))?;
        let dim = first.dim();
        let label_count = first.label_count;
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut features = Matrix::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for s in sets {
            if s.dim() != dim || s.label_count != label_count {
                return Err(Error::dimension("sets disagree on dim or label count"));
            }
            for i in 0..s.len() {
                features.row_mut(row).copy_from_slice(s.features.row(i));
                row += 1;
            }
            labels.extend_from_slice(&s.labels);
        }
        LabeledFeatureSet::new(features, labels, label_count)
    }

    /// Mean per-dimension variance spread: the trace of the empirical
    /// covariance of the selected rows.
    pub fn covariance_trace(&self, label: u8) -> f64 {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        if rows.len() < 2 {
            return 0.0;
        }
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for (m, &v) in mean.iter_mut().zip(self.features.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut trace = 0.0;
        for &r in &rows {
            for (m, &v) in mean.iter().zip(self.features.row(r)) {
                trace += (v - m) * (v - m);
            }
        }
        trace / (rows.len() - 1) as f64
    }
}

/// Parameters of the synthetic drifting benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub tasks: usize,
    pub dim: usize,
    pub train_n: usize,
    pub test_n: usize,
    /// Clusters in each task's fake mixture.
    pub fake_clusters: usize,
    /// How far fake cluster directions wander per task; 0 freezes them.
    pub drift: f64,
    /// How far the real cluster center moves per task; 0 pins it. Slow real
    /// movement models recording conditions changing between collections.
    pub real_drift: f64,
    /// Share of the train split drawn from the real class; deviating from
    /// 0.5 skews the training mix the way field corpora do. Test splits stay
    /// balanced so error rates are estimated evenly from both classes.
    pub real_fraction: f64,
    /// Per-dimension noise around the real cluster center.
    pub real_scale: f64,
    /// Per-dimension noise around each fake cluster center.
    pub fake_scale: f64,
    /// Distance of fake cluster centers from the real center.
    pub cluster_radius: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            tasks: 4,
            dim: 32,
            train_n: 2000,
            test_n: 1000,
            fake_clusters: 3,
            drift: 1.0,
            real_drift: 1.25,
            real_fraction: 0.9,
            real_scale: 0.8,
            fake_scale: 0.4,
            cluster_radius: 1.3,
            seed: 0,
        }
    }
}

/// One task's train/test split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
}

const TAG_REAL_CENTER: u64 = 0x52_4541_4c43;
const TAG_REAL_DRIFT: u64 = 0x52_4541_4c44;
const TAG_BASE_DIR: u64 = 0x42_4153_4544;
const TAG_JITTER: u64 = 0x4a_4954_5445;
const TAG_SAMPLE_TRAIN: u64 = 0x53_4d50_5452;
const TAG_SAMPLE_TEST: u64 = 0x53_4d50_5445;

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_set(
    n: usize,
    dim: usize,
    rng: &mut Rng,
    real_center: &[f64],
    real_scale: f64,
    fake_centers: &[Vec<f64>],
    fake_scale: f64,
    real_fraction: f64,
) -> Result<LabeledFeatureSet> {
    // At real_fraction 0.5 the class counts differ by at most one; both
    // classes always get at least one sample.
    let n_real = ((n as f64 * real_fraction).ceil() as usize).clamp(1, n - 1);
    let n_fake = n - n_real;
    let mut rows: Vec<(Vec<f64>, u8)> = Vec::with_capacity(n);
    for _ in 0..n_real {
        let x: Vec<f64> = real_center
            .iter()
            .map(|&c| c + real_scale * rng.normal())
            .collect();
        rows.push((x, 1));
    }
    for i in 0..n_fake {
        let center = &fake_centers[i % fake_centers.len()];
        let x: Vec<f64> = center.iter().map(|&c| c + fake_scale * rng.normal()).collect();
        rows.push((x, 0));
    }
    rng.shuffle(&mut rows);
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (out, (x, label)) in rows.into_iter().enumerate() {
        for (dst, v) in features.row_mut(out).iter_mut().zip(x) {
            *dst = v as f32 as f64; // 32-bit provenance
        }
        labels.push(label);
    }
    LabeledFeatureSet::new(features, labels, 2)
}

/// Generates the drifting task sequence. Deterministic for a given spec:
/// every draw comes from streams keyed by (seed, purpose, task, cluster).
/// With both drifts 0 all tasks are identically distributed; growing drift
/// rotates each task's fake clusters away from their shared placement, and
/// real_drift walks the real center (with the fake clusters anchored to it)
/// a fixed distance per task.
pub fn generate_tasks(spec: &SyntheticTaskSpec) -> Result<Vec<TaskData>> {
    if spec.dim < 1 {
        return Err(Error::config("feature dimension must be at least 1"));
    }
    if spec.tasks < 1 {
        return Err(Error::config("task count must be at least 1"));
    }
    if spec.train_n < 2 || spec.test_n < 2 {
        return Err(Error::config(
            "train and test sizes must be at least 2 so both classes appear",
        ));
    }
    if spec.fake_clusters < 1 {
        return Err(Error::config("fake mixture needs at least one cluster"));
    }
    if !(spec.real_scale > 0.0) || !(spec.fake_scale > 0.0) {
        return Err(Error::config("feature scales must be positive"));
    }
    if !(spec.real_fraction > 0.0 && spec.real_fraction < 1.0) {
        return Err(Error::config("real fraction must lie strictly between 0 and 1"));
    }
    if !(spec.drift >= 0.0)
        || !(spec.real_drift >= 0.0)
        || !spec.real_drift.is_finite()
        || !spec.cluster_radius.is_finite()
        || spec.cluster_radius < 0.0
    {
        return Err(Error::config("drift and cluster radius must be nonnegative"));
    }
    // The fake class must be the more spread-out one; either a wider noise
    // scale or a multi-cluster mixture guarantees that.
    if spec.fake_scale <= spec.real_scale && spec.fake_clusters < 2 {
        return Err(Error::config(
            "fake samples need fake_scale > real_scale or at least two clusters",
        ));
    }

    let mut center_rng = Rng::stream(spec.seed, TAG_REAL_CENTER);
    let real_center: Vec<f64> = (0..spec.dim).map(|_| center_rng.normal()).collect();

    let base_dirs: Vec<Vec<f64>> = (0..spec.fake_clusters)
        .map(|c| unit_vector(&mut Rng::stream(spec.seed, TAG_BASE_DIR + c as u64), spec.dim))
        .collect();

    let mut out = Vec::with_capacity(spec.tasks);
    for k in 0..spec.tasks {
        let task_real_center: Vec<f64> = if spec.real_drift > 0.0 && k > 0 {
            let step = unit_vector(
                &mut Rng::stream(spec.seed, TAG_REAL_DRIFT + k as u64),
                spec.dim,
            );
            real_center
                .iter()
                .zip(step)
                .map(|(c, s)| c + spec.real_drift * k as f64 * s)
                .collect()
        } else {
            real_center.clone()
        };
        let fake_centers: Vec<Vec<f64>> = (0..spec.fake_clusters)
            .map(|c| {
                let mut dir: Vec<f64> = base_dirs[c].clone();
                let shift = spec.drift * k as f64;
                if shift > 0.0 {
                    let mut jitter_rng = Rng::stream(
                        spec.seed,
                        TAG_JITTER + (k * spec.fake_clusters + c) as u64,
                    );
                    let jitter = unit_vector(&mut jitter_rng, spec.dim);
                    let norm = {
                        let mut s = 0.0;
                        for (d, j) in dir.iter_mut().zip(jitter) {
                            *d += shift * j;
                            s += *d * *d;
                        }
                        s.sqrt()
                    };
                    for d in &mut dir {
                        *d /= norm;
                    }
                }
                dir.iter()
                    .zip(&task_real_center)
                    .map(|(d, c)| c + spec.cluster_radius * d)
                    .collect()
            })
            .collect();
        let train = sample_set(
            spec.train_n,
            spec.dim,
            &mut Rng::stream(spec.seed, TAG_SAMPLE_TRAIN + k as u64),
            &task_real_center,
            spec.real_scale,
            &fake_centers,
            spec.fake_scale,
            spec.real_fraction,
        )?;
        let test = sample_set(
            spec.test_n,
            spec.dim,
            &mut Rng::stream(spec.seed, TAG_SAMPLE_TEST + k as u64),
            &task_real_center,
            spec.real_scale,
            &fake_centers,
            spec.fake_scale,
            0.5,
        )?;
        out.push(TaskData { train, test });
    }
    Ok(out)
}

const DATASET_MAGIC: &[u8; 4] = b"RGFD";
const DATASET_VERSION: u16 = 1;

/// Writes a dataset: magic "RGFD", version u16, sample count u64, feature
/// dimension u32, label count u16, features as f32 row-major, then one label
/// byte per sample. All integers little-endian.
pub fn write_dataset(set: &LabeledFeatureSet, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u64(set.len() as u64);
    w.u32(set.dim() as u32);
    w.u16(set.label_count());
    w.f32_block(set.features().data().iter().copied());
    w.bytes(set.labels());
    write_file(path, &w.into_bytes())
}

/// Reads a dataset written by `write_dataset`.
pub fn read_dataset(path: &Path) -> Result<LabeledFeatureSet> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let n = r.u64("sample count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    let label_count = r.u16("label count")?;
    let features = Matrix::from_vec(n, d, r.f32_block(n * d, "features")?)?;
    let labels = r.byte_block(n, "labels")?.to_vec();
    r.finish("dataset")?;
    LabeledFeatureSet::new(features, labels, label_count)
}

/// Reads a CSV dataset: one sample per line, features then a final `label`
/// column, with an optional header. Features pass through 32-bit precision,
/// so CSV and binary ingestion of the same data produce identical sets.
pub fn read_dataset_csv(path: &Path) -> Result<LabeledFeatureSet> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(Vec<f64>, u8)> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            // Header row.
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::config(format!(
                "line {}: a sample needs at least one feature and a label",
                lineno + 1
            )));
        }
        let d = fields.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::config(format!(
                "line {}: expected {} features, got {d}",
                lineno + 1,
                width.unwrap()
            )));
        }
        let mut feats = Vec::with_capacity(d);
        for f in &fields[..d] {
            let v: f32 = f.parse().map_err(|_| {
                Error::config(format!("line {}: bad feature value {f:?}", lineno + 1))
            })?;
            feats.push(f64::from(v));
        }
        let label: u8 = fields[d].parse().map_err(|_| {
            Error::config(format!(
                "line {}: bad label value {:?}",
                lineno + 1,
                fields[d]
            ))
        })?;
        rows.push((feats, label));
    }
    if rows.is_empty() {
        return Err(Error::config("CSV holds no samples"));
    }
    let d = rows[0].0.len();
    let mut features = Matrix::zeros(rows.len(), d);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (feats, label)) in rows.into_iter().enumerate() {
        features.row_mut(i).copy_from_slice(&feats);
        labels.push(label);
    }
    let label_count = u16::from(*labels.iter().max().unwrap()) + 1;
    LabeledFeatureSet::new(features, labels, label_count.max(2))
}

/// Writes the CSV form read by `read_dataset_csv`, with a header.
pub fn write_dataset_csv(set: &LabeledFeatureSet, path: &Path) -> Result<()> {
    let mut text = String::new();
    for i in 0..set.dim() {
        text.push_str(&format!("f{},", i + 1));
    }
    text.push_str("label\n");
    for i in 0..set.len() {
        for &v in set.features().row(i) {
            text.push_str(&format!("{},", v as f32));
        }
        text.push_str(&format!("{}\n", set.labels()[i]));
    }
    write_file(path, text.as_bytes())
}
