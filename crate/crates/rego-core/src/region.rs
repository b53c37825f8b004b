//! Region analysis: per-group Fisher information, importance localization,
//! the four-letter region algebra, and the forgetting-curve release of stale
//! neurons.
//!
//! Per-parameter label codes:
//!   0 = free (unimportant to any retained task),
//!   1 = important to the stable group only,
//!   2 = important to the diverse group only,
//!   3 = important to both.
//! A region matrix for one task is the entrywise sum of a diverse-group
//! localization (values {0, 2}) and a stable-group localization ({0, 1}),
//! which maps bijectively onto {0, 1, 2, 3}. Merging a history of region
//! matrices is a bitwise union: bit 0 collects stable importance, bit 1
//! diverse importance.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmtio::{read_file, write_file, Reader, Writer};
use crate::mlp::{GradientSet, MlpModel};
use crate::surgery::BlendConfig;
use crate::tensor::{percentile_threshold, ByteMatrix};

/// The two label groups of the detection task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelGroup {
    /// Task-specific classes (fake/spoofed audio in the binary setting).
    Diverse,
    /// Classes whose distribution is shared across tasks (bona fide audio).
    Stable,
}

impl LabelGroup {
    /// The region label an important parameter of this group receives.
    pub fn region_label(self) -> u8 {
        match self {
            LabelGroup::Diverse => 2,
            LabelGroup::Stable => 1,
        }
    }
}

/// Per-parameter byte labels shaped exactly like a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub layers: Vec<LabelLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelLayer {
    pub weight: ByteMatrix,
    pub bias: ByteMatrix,
}

impl LabelSet {
    pub fn zeros_like(shape: &GradientSet) -> LabelSet {
        LabelSet {
            layers: shape
                .layers
                .iter()
                .map(|l| LabelLayer {
                    weight: ByteMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: ByteMatrix::zeros(l.bias.rows(), 1),
                })
                .collect(),
        }
    }

    pub fn filled_like(shape: &GradientSet, value: u8) -> LabelSet {
        let mut set = LabelSet::zeros_like(shape);
        set.for_each_block_mut(|m| {
            for v in m.data_mut() {
                *v = value;
            }
        });
        set
    }

    /// Test helper: one layer per row, each a 1 x n weight block with a zero
    /// bias label.
    pub fn from_weight_rows(rows: &[&[u8]]) -> LabelSet {
        LabelSet {
            layers: rows
                .iter()
                .map(|r| LabelLayer {
                    weight: ByteMatrix::from_vec(1, r.len(), r.to_vec()).unwrap(),
                    bias: ByteMatrix::zeros(1, 1),
                })
                .collect(),
        }
    }

    pub fn congruent(&self, other: &LabelSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.same_shape(&b.weight) && a.bias.same_shape(&b.bias))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ByteMatrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut ByteMatrix)) {
        for l in &mut self.layers {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }

    pub fn entry_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn count(&self, value: u8) -> usize {
        self.blocks().map(|b| b.count(value)).sum()
    }

    pub fn flatten(&self) -> Vec<u8> {
        let mut flat = Vec::with_capacity(self.entry_count());
        for b in self.blocks() {
            flat.extend_from_slice(b.data());
        }
        flat
    }

    fn validate_alphabet(&self, allowed: &[u8], what: &str) -> Result<()> {
        for b in self.blocks() {
            if let Some(&bad) = b.data().iter().find(|v| !allowed.contains(v)) {
                return Err(Error::domain(format!(
                    "{what} contains label {bad}, expected one of {allowed:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Diagonal empirical Fisher information for one label group: the mean of
/// per-sample squared log-likelihood gradients, evaluated at fixed parameters.
#[derive(Debug, Clone)]
pub struct FimEstimate {
    pub values: GradientSet,
    /// None marks a class-agnostic estimate over all samples.
    pub group: Option<LabelGroup>,
    pub sample_count: usize,
}

/// Importance marks for one group: 0 or the group's region label.
#[derive(Debug, Clone)]
pub struct Localization {
    pub labels: LabelSet,
    pub group: LabelGroup,
}

impl Localization {
    /// A localization marking nothing as important.
    pub fn empty(shape: &GradientSet, group: LabelGroup) -> Localization {
        Localization {
            labels: LabelSet::zeros_like(shape),
            group,
        }
    }
}

/// Per-parameter region labels for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMatrix {
    pub labels: LabelSet,
    pub task_index: u32,
}

impl RegionMatrix {
    /// A region matrix with every entry set to the same label.
    pub fn uniform(shape: &GradientSet, label: u8, task_index: u32) -> RegionMatrix {
        RegionMatrix {
            labels: LabelSet::filled_like(shape, label),
            task_index,
        }
    }
}

/// Accumulated forgetting-curve weight per parameter at the start of task k.
#[derive(Debug, Clone)]
pub struct MemoryMatrix {
    pub values: GradientSet,
    pub task_index: u32,
}

/// Retention mask: 1 keeps a parameter's history, 0 releases it.
#[derive(Debug, Clone)]
pub struct EbbinghausMask {
    pub bits: LabelSet,
    pub gamma: f64,
}

impl EbbinghausMask {
    pub fn all_ones(shape: &GradientSet, gamma: f64) -> EbbinghausMask {
        EbbinghausMask {
            bits: LabelSet::filled_like(shape, 1),
            gamma,
        }
    }

    pub fn released_count(&self) -> usize {
        self.bits.count(0)
    }
}

fn group_rows(data: &crate::data::LabeledFeatureSet, keep: impl Fn(u8) -> bool) -> Vec<usize> {
    data.labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| if keep(l) { Some(i) } else { None })
        .collect()
}

fn fim_over_rows(
    model: &MlpModel,
    data: &crate::data::LabeledFeatureSet,
    rows: &[usize],
) -> Result<GradientSet> {
    let mut acc = GradientSet::zeros_like(model);
    for &i in rows {
        let sq = crate::mlp::per_sample_loglik_sqgrad(model, data.features().row(i), data.labels()[i])?;
        acc.add_assign(&sq)?;
    }
    acc.scale(1.0 / rows.len() as f64);
    Ok(acc)
}

/// Estimates the diagonal empirical Fisher information over one label group,
/// iterating samples in dataset order.
pub fn estimate_fim(
    model: &MlpModel,
    data: &crate::data::LabeledFeatureSet,
    grouping: &BlendConfig,
    group: LabelGroup,
) -> Result<FimEstimate> {
    let rows = group_rows(data, |l| grouping.group_of(l) == Some(group));
    if rows.is_empty() {
        return Err(Error::domain(format!("no samples in group {group:?}")));
    }
    Ok(FimEstimate {
        values: fim_over_rows(model, data, &rows)?,
        group: Some(group),
        sample_count: rows.len(),
    })
}

/// Class-agnostic Fisher estimate over every sample, used by the variant that
/// skips per-group localization.
pub fn estimate_fim_combined(
    model: &MlpModel,
    data: &crate::data::LabeledFeatureSet,
) -> Result<FimEstimate> {
    if data.len() == 0 {
        return Err(Error::domain("empty dataset"));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(FimEstimate {
        values: fim_over_rows(model, data, &rows)?,
        group: None,
        sample_count: rows.len(),
    })
}

/// Threshold scope for localization: one threshold per parameter block
/// (each weight matrix and each bias column), or one across all blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PercentileScope {
    PerBlock,
    Global,
}

fn localize_with_label(
    fim: &FimEstimate,
    alpha: f64,
    scope: PercentileScope,
    label: u8,
) -> Result<LabelSet> {
    let mut labels = LabelSet::zeros_like(&fim.values);
    match scope {
        PercentileScope::PerBlock => {
            for (ll, fl) in labels.layers.iter_mut().zip(&fim.values.layers) {
                for (lb, fb) in [
                    (&mut ll.weight, &fl.weight),
                    (&mut ll.bias, &fl.bias),
                ] {
                    let t = percentile_threshold(fb.data(), alpha)?;
                    for (lv, &fv) in lb.data_mut().iter_mut().zip(fb.data()) {
                        if fv >= t {
                            *lv = label;
                        }
                    }
                }
            }
        }
        PercentileScope::Global => {
            let all: Vec<f64> = fim.values.flatten();
            let t = percentile_threshold(&all, alpha)?;
            for (ll, fl) in labels.layers.iter_mut().zip(&fim.values.layers) {
                for (lb, fb) in [
                    (&mut ll.weight, &fl.weight),
                    (&mut ll.bias, &fl.bias),
                ] {
                    for (lv, &fv) in lb.data_mut().iter_mut().zip(fb.data()) {
                        if fv >= t {
                            *lv = label;
                        }
                    }
                }
            }
        }
    }
    Ok(labels)
}

/// Marks parameters whose Fisher value reaches the alpha-percentile threshold
/// of their block as important to the estimate's group. Ties at the threshold
/// are included (`>=`).
pub fn localize(fim: &FimEstimate, alpha: f64, scope: PercentileScope) -> Result<Localization> {
    let group = fim.group.ok_or_else(|| {
        Error::domain("localization needs a group-tagged estimate; use localize_as")
    })?;
    Ok(Localization {
        labels: localize_with_label(fim, alpha, scope, group.region_label())?,
        group,
    })
}

/// Localizes a (possibly class-agnostic) estimate under an explicit group.
pub fn localize_as(
    fim: &FimEstimate,
    group: LabelGroup,
    alpha: f64,
    scope: PercentileScope,
) -> Result<Localization> {
    Ok(Localization {
        labels: localize_with_label(fim, alpha, scope, group.region_label())?,
        group,
    })
}

/// Entrywise sum of a diverse localization ({0, 2}) and a stable localization
/// ({0, 1}) into a region matrix over {0, 1, 2, 3}.
pub fn compose_regions(
    diverse: &Localization,
    stable: &Localization,
    task_index: u32,
) -> Result<RegionMatrix> {
    if diverse.group != LabelGroup::Diverse || stable.group != LabelGroup::Stable {
        return Err(Error::domain(
            "compose_regions takes (diverse, stable) localizations in that order",
        ));
    }
    diverse.labels.validate_alphabet(&[0, 2], "diverse localization")?;
    stable.labels.validate_alphabet(&[0, 1], "stable localization")?;
    if !diverse.labels.congruent(&stable.labels) {
        return Err(Error::dimension("localizations are not shape-congruent"));
    }
    let mut labels = diverse.labels.clone();
    for (dl, sl) in labels.layers.iter_mut().zip(&stable.labels.layers) {
        for (db, sb) in [
            (&mut dl.weight, &sl.weight),
            (&mut dl.bias, &sl.bias),
        ] {
            for (dv, &sv) in db.data_mut().iter_mut().zip(sb.data()) {
                *dv += sv;
            }
        }
    }
    Ok(RegionMatrix { labels, task_index })
}

/// The forgetting curve exp(-t / k): weight retained after `t` tasks when the
/// current task index is `k`.
pub fn phi(t: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("task index k must be at least 1"));
    }
    if !(t >= 0.0) {
        return Err(Error::domain(format!("elapsed tasks {t} must be >= 0")));
    }
    Ok((-t / k as f64).exp())
}

/// How history entries are aged when accumulating memory weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayConvention {
    /// Task j contributes phi(k - j): recent tasks decay least. Default.
    AgeBased,
    /// Task j contributes phi(j): the raw summation-index reading.
    IndexBased,
}

/// Accumulates forgetting-curve weight per parameter over the region history
/// of tasks 1..k-1. A task contributes to a parameter iff its region label
/// there is 1, 2, or 3 (free parameters accumulate nothing).
pub fn memory_matrix(
    history: &[RegionMatrix],
    k: usize,
    convention: DecayConvention,
) -> Result<MemoryMatrix> {
    if history.is_empty() {
        return Err(Error::domain("memory matrix of an empty history"));
    }
    if history.len() != k - 1 {
        return Err(Error::domain(format!(
            "task {k} expects {} history entries, got {}",
            k - 1,
            history.len()
        )));
    }
    for r in history {
        r.labels.validate_alphabet(&[0, 1, 2, 3], "region history")?;
        if !r.labels.congruent(&history[0].labels) {
            return Err(Error::dimension("region history shapes disagree"));
        }
    }
    let shape = region_shape(&history[0]);
    let mut values = shape.map(|_| 0.0);
    for (idx, r) in history.iter().enumerate() {
        let j = idx + 1;
        let t = match convention {
            DecayConvention::AgeBased => (k - j) as f64,
            DecayConvention::IndexBased => j as f64,
        };
        let weight = phi(t, k)?;
        for (vl, rl) in values.layers.iter_mut().zip(&r.labels.layers) {
            for (vb, rb) in [
                (&mut vl.weight, &rl.weight),
                (&mut vl.bias, &rl.bias),
            ] {
                for (v, &label) in vb.data_mut().iter_mut().zip(rb.data()) {
                    if label != 0 {
                        *v += weight;
                    }
                }
            }
        }
    }
    Ok(MemoryMatrix {
        values,
        task_index: k as u32,
    })
}

fn region_shape(r: &RegionMatrix) -> GradientSet {
    GradientSet {
        layers: r
            .labels
            .layers
            .iter()
            .map(|l| crate::mlp::LayerGrad {
                weight: crate::tensor::Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: crate::tensor::Matrix::zeros(l.bias.rows(), 1),
            })
            .collect(),
    }
}

/// Thresholds memory weight into a retention mask: strictly above gamma keeps
/// a parameter's history, at or below releases it.
pub fn ebbinghaus_mask(m: &MemoryMatrix, gamma: f64) -> Result<EbbinghausMask> {
    if !(gamma >= 0.0) {
        return Err(Error::domain(format!("gamma {gamma} must be >= 0")));
    }
    let mut bits = LabelSet::zeros_like(&m.values);
    for (bl, vl) in bits.layers.iter_mut().zip(&m.values.layers) {
        for (bb, vb) in [
            (&mut bl.weight, &vl.weight),
            (&mut bl.bias, &vl.bias),
        ] {
            for (b, &v) in bb.data_mut().iter_mut().zip(vb.data()) {
                *b = u8::from(v > gamma);
            }
        }
    }
    Ok(EbbinghausMask { bits, gamma })
}

/// Merges a region history into the matrix used for the next task: per entry,
/// bit 0 is set if any past task labeled it 1 or 3, bit 1 if any labeled it
/// 2 or 3. Entries whose mask bit is 0 are released to label 0 regardless of
/// history. With an all-ones mask the merge is a plain bitwise union, so it
/// is commutative and idempotent over history order.
pub fn merge_history(history: &[RegionMatrix], mask: &EbbinghausMask) -> Result<RegionMatrix> {
    if history.is_empty() {
        return Err(Error::domain("merge of an empty history"));
    }
    for r in history {
        r.labels.validate_alphabet(&[0, 1, 2, 3], "region history")?;
        if !r.labels.congruent(&history[0].labels) {
            return Err(Error::dimension("region history shapes disagree"));
        }
    }
    if !mask.bits.congruent(&history[0].labels) {
        return Err(Error::dimension("mask is not shape-congruent with history"));
    }
    let mut merged = LabelSet::zeros_like(&region_shape(&history[0]));
    for r in history {
        for (ml, rl) in merged.layers.iter_mut().zip(&r.labels.layers) {
            for (mb, rb) in [
                (&mut ml.weight, &rl.weight),
                (&mut ml.bias, &rl.bias),
            ] {
                for (m, &label) in mb.data_mut().iter_mut().zip(rb.data()) {
                    *m |= label;
                }
            }
        }
    }
    for (ml, kl) in merged.layers.iter_mut().zip(&mask.bits.layers) {
        for (mb, kb) in [
            (&mut ml.weight, &kl.weight),
            (&mut ml.bias, &kl.bias),
        ] {
            for (m, &keep) in mb.data_mut().iter_mut().zip(kb.data()) {
                if keep == 0 {
                    *m = 0;
                }
            }
        }
    }
    let task_index = history.iter().map(|r| r.task_index).max().unwrap() + 1;
    Ok(RegionMatrix {
        labels: merged,
        task_index,
    })
}

const REGION_MAGIC: &[u8; 4] = b"RGRM";
const REGION_VERSION: u16 = 1;

/// Writes a region archive: magic "RGRM", version u16, task index u32, then
/// per parameter block rows u32, cols u32 and the labels as bytes, in the
/// fixed parameter order.
pub fn write_regions(regions: &RegionMatrix, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(REGION_MAGIC);
    w.u16(REGION_VERSION);
    w.u32(regions.task_index);
    for b in regions.labels.blocks() {
        w.u32(b.rows() as u32);
        w.u32(b.cols() as u32);
        w.bytes(b.data());
    }
    write_file(path, &w.into_bytes())
}

/// Reads an archive written by `write_regions`.
pub fn read_regions(path: &Path) -> Result<RegionMatrix> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(REGION_MAGIC)?;
    let version = r.u16("version")?;
    if version != REGION_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported region archive version {version}"),
        ));
    }
    let task_index = r.u32("task index")?;
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        let offset = r.offset();
        let data = r.byte_block(rows * cols, "block labels")?.to_vec();
        if let Some(&bad) = data.iter().find(|&&v| v > 3) {
            return Err(Error::format(
                offset,
                format!("region label {bad} outside 0..=3"),
            ));
        }
        blocks.push(ByteMatrix::from_vec(rows, cols, data)?);
    }
    layers_from_blocks(blocks, task_index)
}

fn layers_from_blocks(blocks: Vec<ByteMatrix>, task_index: u32) -> Result<RegionMatrix> {
    if blocks.is_empty() || blocks.len() % 2 != 0 {
        return Err(Error::format(
            0,
            format!(
                "region archive holds {} blocks, expected a positive even count",
                blocks.len()
            ),
        ));
    }
    let mut iter = blocks.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (iter.next(), iter.next()) {
        layers.push(LabelLayer { weight, bias });
    }
    Ok(RegionMatrix {
        labels: LabelSet { layers },
        task_index,
    })
}

const MEMORY_MATRIX_MAGIC: &[u8; 4] = b"RGMM";
const MEMORY_MATRIX_VERSION: u16 = 1;

/// Writes a memory matrix: magic "RGMM", version u16, task index u32, then
/// per parameter block rows u32, cols u32 and entries as f32.
pub fn write_memory_matrix(m: &MemoryMatrix, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(MEMORY_MATRIX_MAGIC);
    w.u16(MEMORY_MATRIX_VERSION);
    w.u32(m.task_index);
    for b in m.values.blocks() {
        w.u32(b.rows() as u32);
        w.u32(b.cols() as u32);
        w.f32_block(b.data().iter().copied());
    }
    write_file(path, &w.into_bytes())
}

/// Reads a memory matrix written by `write_memory_matrix`.
pub fn read_memory_matrix(path: &Path) -> Result<MemoryMatrix> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(MEMORY_MATRIX_MAGIC)?;
    let version = r.u16("version")?;
    if version != MEMORY_MATRIX_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported memory matrix version {version}"),
        ));
    }
    let task_index = r.u32("task index")?;
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        let data = r.f32_block(rows * cols, "block values")?;
        blocks.push(crate::tensor::Matrix::from_vec(rows, cols, data)?);
    }
    if blocks.is_empty() || blocks.len() % 2 != 0 {
        return Err(Error::format(
            0,
            format!(
                "memory matrix holds {} blocks, expected a positive even count",
                blocks.len()
            ),
        ));
    }
    let mut iter = blocks.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (iter.next(), iter.next()) {
        layers.push(crate::mlp::LayerGrad { weight, bias });
    }
    Ok(MemoryMatrix {
        values: GradientSet { layers },
        task_index,
    })
}
