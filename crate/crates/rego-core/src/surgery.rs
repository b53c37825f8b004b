//! Gradient surgery: projection onto a remembered gradient direction,
//! its orthogonal complement, and the region-driven composition of both
//! into the update actually fed to the optimizer.
//!
//! Projection granularity is per layer: each layer's weight and bias entries
//! are flattened into one vector, a single projection coefficient is computed
//! for it, and the resulting entries are then picked per parameter according
//! to the region labels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmtio::{read_file, write_file, Reader, Writer};
use crate::mlp::{GradientSet, LayerGrad};
use crate::region::{LabelGroup, RegionMatrix};

/// Squared-norm floor below which a reference layer is treated as zero and
/// the projected component is zeroed instead of divided by noise.
pub const PROJECTION_NORM_FLOOR: f64 = 1e-12;

/// Maps class labels onto the stable group (kept compact; "real" in the
/// binary detection setting) and the diverse group (task-specific; "fake").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlendConfig {
    stable: Vec<u8>,
    diverse: Vec<u8>,
}

impl BlendConfig {
    /// Binary detection default: label 1 is real/stable, label 0 is
    /// fake/diverse.
    pub fn binary() -> BlendConfig {
        BlendConfig {
            stable: vec![1],
            diverse: vec![0],
        }
    }

    /// Grouped multi-way labels. Both groups must be nonempty and disjoint.
    pub fn new(mut stable: Vec<u8>, mut diverse: Vec<u8>) -> Result<BlendConfig> {
        stable.sort_unstable();
        stable.dedup();
        diverse.sort_unstable();
        diverse.dedup();
        if stable.is_empty() || diverse.is_empty() {
            return Err(Error::config("both label groups must be nonempty"));
        }
        if stable.iter().any(|l| diverse.binary_search(l).is_ok()) {
            return Err(Error::config("label groups must be disjoint"));
        }
        Ok(BlendConfig { stable, diverse })
    }

    pub fn stable_labels(&self) -> &[u8] {
        &self.stable
    }

    pub fn diverse_labels(&self) -> &[u8] {
        &self.diverse
    }

    pub fn is_stable(&self, label: u8) -> bool {
        self.stable.binary_search(&label).is_ok()
    }

    pub fn group_of(&self, label: u8) -> Option<LabelGroup> {
        if self.stable.binary_search(&label).is_ok() {
            Some(LabelGroup::Stable)
        } else if self.diverse.binary_search(&label).is_ok() {
            Some(LabelGroup::Diverse)
        } else {
            None
        }
    }

    /// Checks that every label below `label_count` belongs to a group.
    pub fn validate_covers(&self, label_count: u16) -> Result<()> {
        for l in 0..label_count {
            let l = u8::try_from(l)
                .map_err(|_| Error::config("label counts above 255 are not supported"))?;
            if self.group_of(l).is_none() {
                return Err(Error::config(format!(
                    "label {l} is in neither label group"
                )));
            }
        }
        Ok(())
    }
}

/// Archive of per-task average gradients plus the running reference
/// direction: after k archived tasks the reference is the arithmetic mean
/// of all k task averages.
#[derive(Debug, Clone, Default)]
pub struct GradientMemory {
    averages: Vec<GradientSet>,
    reference: Option<GradientSet>,
}

impl GradientMemory {
    pub fn new() -> GradientMemory {
        GradientMemory::default()
    }

    pub fn from_averages(averages: Vec<GradientSet>) -> Result<GradientMemory> {
        let mut mem = GradientMemory::new();
        for avg in averages {
            mem.push_average(avg)?;
        }
        Ok(mem)
    }

    pub fn task_count(&self) -> usize {
        self.averages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.averages.is_empty()
    }

    pub fn averages(&self) -> &[GradientSet] {
        &self.averages
    }

    /// The reference direction: mean of all archived task averages.
    pub fn reference(&self) -> Option<&GradientSet> {
        self.reference.as_ref()
    }

    /// Reference recency-weighted by the forgetting curve exp(-age / k),
    /// where `k` is the index of the task about to be trained. Provided as
    /// an alternative to the uniform mean.
    pub fn decayed_reference(&self, k: usize) -> Result<GradientSet> {
        if self.averages.is_empty() {
            return Err(Error::domain("gradient memory is empty"));
        }
        if k <= self.averages.len() {
            return Err(Error::domain(format!(
                "task index {k} must exceed the {} archived tasks",
                self.averages.len()
            )));
        }
        let mut acc = self.averages[0].map(|_| 0.0);
        let mut total = 0.0;
        for (idx, avg) in self.averages.iter().enumerate() {
            let age = (k - (idx + 1)) as f64;
            let weight = (-age / k as f64).exp();
            total += weight;
            acc.zip_apply(avg, |a, b| *a += weight * b)?;
        }
        acc.scale(1.0 / total);
        Ok(acc)
    }

    fn push_average(&mut self, avg: GradientSet) -> Result<()> {
        if let Some(first) = self.averages.first() {
            if !first.congruent(&avg) {
                return Err(Error::dimension(
                    "task average is not shape-congruent with the archive",
                ));
            }
        }
        self.averages.push(avg);
        let n = self.averages.len() as f64;
        let mut mean = self.averages[0].clone();
        for avg in &self.averages[1..] {
            mean.add_assign(avg)?;
        }
        mean.scale(1.0 / n);
        self.reference = Some(mean);
        Ok(())
    }
}

/// Archives one task's average gradient (sum over batches divided by the
/// batch count) and recomputes the reference direction.
pub fn update_memory(
    memory: &mut GradientMemory,
    task_gradient_sum: &GradientSet,
    batch_count: usize,
) -> Result<()> {
    if batch_count == 0 {
        return Err(Error::domain("batch count must be positive"));
    }
    let mut avg = task_gradient_sum.clone();
    avg.scale(1.0 / batch_count as f64);
    memory.push_average(avg)
}

fn layer_dot(a: &LayerGrad, b: &LayerGrad) -> Result<f64> {
    if !a.weight.same_shape(&b.weight) || !a.bias.same_shape(&b.bias) {
        return Err(Error::dimension("layers are not shape-congruent"));
    }
    let mut acc = 0.0;
    for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
        acc += x * y;
    }
    for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
        acc += x * y;
    }
    Ok(acc)
}

/// Projects `g` onto a reference direction, layer by layer: each layer's
/// flattened entries are scaled copies of the reference with coefficient
/// (g . ref) / ||ref||^2. Layers whose reference norm falls below the floor
/// produce a zero projection.
pub fn project_onto(g: &GradientSet, reference: &GradientSet) -> Result<GradientSet> {
    if !g.congruent(reference) {
        return Err(Error::dimension(
            "gradient and reference are not shape-congruent",
        ));
    }
    let mut out = g.map(|_| 0.0);
    for ((gl, rl), ol) in g
        .layers
        .iter()
        .zip(&reference.layers)
        .zip(out.layers.iter_mut())
    {
        let denom = layer_dot(rl, rl)?;
        if denom < PROJECTION_NORM_FLOOR {
            continue;
        }
        let coeff = layer_dot(gl, rl)? / denom;
        for (o, &r) in ol.weight.data_mut().iter_mut().zip(rl.weight.data()) {
            *o = coeff * r;
        }
        for (o, &r) in ol.bias.data_mut().iter_mut().zip(rl.bias.data()) {
            *o = coeff * r;
        }
    }
    Ok(out)
}

/// Projects `g` onto the memory's reference direction.
pub fn project(g: &GradientSet, memory: &GradientMemory) -> Result<GradientSet> {
    let reference = memory
        .reference()
        .ok_or_else(|| Error::domain("gradient memory is empty"))?;
    project_onto(g, reference)
}

/// The orthogonal complement g - project(g).
pub fn orthogonalize(g: &GradientSet, memory: &GradientMemory) -> Result<GradientSet> {
    let p = project(g, memory)?;
    g.zip_map(&p, |a, b| a - b)
}

/// Fraction of the batch carrying stable-group labels. With 16 real and
/// 16 fake samples this is 0.5; an all-fake batch yields 0.
pub fn blend_ratio(batch_labels: &[u8], cfg: &BlendConfig) -> Result<f64> {
    if batch_labels.is_empty() {
        return Err(Error::domain("blend ratio of an empty batch"));
    }
    if let Some(&bad) = batch_labels.iter().find(|&&l| cfg.group_of(l).is_none()) {
        return Err(Error::domain(format!(
            "label {bad} is in neither label group"
        )));
    }
    let stable = batch_labels.iter().filter(|&&l| cfg.is_stable(l)).count();
    Ok(stable as f64 / batch_labels.len() as f64)
}

/// Composes the update fed to the optimizer from the per-entry region labels:
/// free entries (0) keep the raw gradient, stable-important entries (1) take
/// the projected component, diverse-important entries (2) take the orthogonal
/// component, and shared entries (3) take beta * projected +
/// (1 - beta) * orthogonal.
pub fn compose_update_with(
    g: &GradientSet,
    reference: &GradientSet,
    regions: &RegionMatrix,
    beta: f64,
) -> Result<GradientSet> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta {beta} outside [0, 1]")));
    }
    if regions.labels.layers.len() != g.layers.len() {
        return Err(Error::dimension(
            "region matrix does not match gradient layout",
        ));
    }
    let g_p = project_onto(g, reference)?;
    let mut out = g.clone();
    for ((ol, (gl, pl)), rl) in out
        .layers
        .iter_mut()
        .zip(g.layers.iter().zip(&g_p.layers))
        .zip(&regions.labels.layers)
    {
        if gl.weight.shape() != rl.weight.shape() || gl.bias.shape() != rl.bias.shape() {
            return Err(Error::dimension(
                "region matrix is not shape-congruent with gradient",
            ));
        }
        let blocks = [
            (
                ol.weight.data_mut(),
                gl.weight.data(),
                pl.weight.data(),
                rl.weight.data(),
            ),
            (
                ol.bias.data_mut(),
                gl.bias.data(),
                pl.bias.data(),
                rl.bias.data(),
            ),
        ];
        for (o_data, g_data, p_data, labels) in blocks {
            for i in 0..o_data.len() {
                o_data[i] = match labels[i] {
                    0 => g_data[i],
                    1 => p_data[i],
                    2 => g_data[i] - p_data[i],
                    3 => {
                        let ortho = g_data[i] - p_data[i];
                        beta * p_data[i] + (1.0 - beta) * ortho
                    }
                    bad => {
                        return Err(Error::domain(format!(
                            "region label {bad} outside 0..=3"
                        )))
                    }
                };
            }
        }
    }
    Ok(out)
}

/// `compose_update_with` against the memory's reference direction.
pub fn compose_update(
    g: &GradientSet,
    memory: &GradientMemory,
    regions: &RegionMatrix,
    beta: f64,
) -> Result<GradientSet> {
    let reference = memory
        .reference()
        .ok_or_else(|| Error::domain("gradient memory is empty"))?;
    compose_update_with(g, reference, regions, beta)
}

const MEMORY_MAGIC: &[u8; 4] = b"RGGM";
const MEMORY_VERSION: u16 = 1;

/// Writes the gradient memory archive: magic "RGGM", version u16, task count
/// u32, then each task's average gradient flattened to f32 in the fixed
/// parameter order. Shapes are not stored; readers supply them.
pub fn write_gradient_memory(memory: &GradientMemory, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(MEMORY_MAGIC);
    w.u16(MEMORY_VERSION);
    w.u32(memory.task_count() as u32);
    for avg in memory.averages() {
        w.f32_block(avg.flatten());
    }
    write_file(path, &w.into_bytes())
}

/// Reads an archive written by `write_gradient_memory`, rebuilding the
/// reference direction from the stored task averages.
pub fn read_gradient_memory(path: &Path, shapes: &[(usize, usize)]) -> Result<GradientMemory> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(MEMORY_MAGIC)?;
    let version = r.u16("version")?;
    if version != MEMORY_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported gradient memory version {version}"),
        ));
    }
    let tasks = r.u32("task count")? as usize;
    let per_task: usize = shapes.iter().map(|&(rr, cc)| rr * cc).sum();
    let mut averages = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let flat = r.f32_block(per_task, "task average gradient")?;
        averages.push(GradientSet::from_flat(shapes, &flat)?);
    }
    r.finish("gradient memory")?;
    GradientMemory::from_averages(averages)
}
