//! Dense multilayer perceptron with softmax cross-entropy loss, exact
//! backpropagation, and SGD/Adam updates.
//!
//! The network is deliberately small and hand-rolled: region analysis needs
//! per-parameter gradients and Fisher values in a fixed layout, so parameters
//! live in plain row-major matrices with biases treated as n x 1 blocks.
//! The flattened parameter order is layer 0 weight (row-major), layer 0 bias,
//! layer 1 weight, layer 1 bias, and so on; every archive format and every
//! per-parameter structure follows that order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmtio::{read_file, write_file, Reader, Writer};
use crate::tensor::{Matrix, Rng};

/// Hidden-layer activation. The output layer always emits raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    // ReLU derivative at exactly zero is taken as zero.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out x in weight matrix.
    pub weight: Matrix,
    /// out x 1 bias column.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Builds a model for the given layer widths, e.g. [32, 64, 64, 64, 64, 2].
/// Weights are uniform draws scaled by sqrt(2 / fan_in); biases start at zero.
/// Draw order is fixed: each layer's weight entries in row-major order.
pub fn build_model(layer_dims: &[usize], rng: &mut Rng) -> Result<MlpModel> {
    if layer_dims.len() < 2 {
        return Err(Error::config(
            "a model needs at least an input and an output width",
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::config("layer widths must be positive"));
    }
    let mut layers = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let mut weight = Matrix::zeros(fan_out, fan_in);
        for v in weight.data_mut() {
            *v = rng.uniform(-scale, scale);
        }
        layers.push(Layer {
            weight,
            bias: Matrix::zeros(fan_out, 1),
        });
    }
    Ok(MlpModel {
        layers,
        activation: Activation::Relu,
    })
}

impl MlpModel {
    pub fn with_activation(mut self, activation: Activation) -> MlpModel {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Layer widths including input and output, e.g. [32, 64, ..., 2].
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Block shapes in flattened parameter order (weight, bias per layer).
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            shapes.push(l.weight.shape());
            shapes.push(l.bias.shape());
        }
        shapes
    }

    /// Copies all parameters into a shape-congruent value set.
    pub fn params(&self) -> GradientSet {
        GradientSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: l.weight.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    /// Rounds every parameter through 32-bit precision; see checkpoint docs.
    pub fn snap_f32(&mut self) {
        for l in &mut self.layers {
            l.weight.snap_f32();
            l.bias.snap_f32();
        }
    }

    /// Order-sensitive FNV-1a hash over the exact parameter bits, used to
    /// assert bitwise equality or read-only behaviour in tests.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for l in &self.layers {
            eat(l.weight.rows() as u64);
            for &v in l.weight.data() {
                eat(v.to_bits());
            }
            for &v in l.bias.data() {
                eat(v.to_bits());
            }
        }
        h
    }
}

/// Per-parameter values shaped exactly like a model: one matrix per weight
/// and one column per bias. Used for gradients, Fisher estimates, memory
/// weights, and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> GradientSet {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(l.bias.rows(), 1),
                })
                .collect(),
        }
    }

    pub fn zeros(shapes: &[(usize, usize)]) -> Result<GradientSet> {
        if shapes.len() % 2 != 0 {
            return Err(Error::dimension(
                "block shapes must come in weight/bias pairs",
            ));
        }
        Ok(GradientSet {
            layers: shapes
                .chunks_exact(2)
                .map(|c| LayerGrad {
                    weight: Matrix::zeros(c[0].0, c[0].1),
                    bias: Matrix::zeros(c[1].0, c[1].1),
                })
                .collect(),
        })
    }

    pub fn congruent(&self, other: &GradientSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.same_shape(&b.weight) && a.bias.same_shape(&b.bias))
    }

    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            shapes.push(l.weight.shape());
            shapes.push(l.bias.shape());
        }
        shapes
    }

    /// Blocks in flattened parameter order: weight then bias per layer.
    pub fn blocks(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn entry_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flattens to a single vector in the documented parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.entry_count());
        for b in self.blocks() {
            flat.extend_from_slice(b.data());
        }
        flat
    }

    /// Inverse of `flatten` for a given block-shape list.
    pub fn from_flat(shapes: &[(usize, usize)], flat: &[f64]) -> Result<GradientSet> {
        let mut set = GradientSet::zeros(shapes)?;
        let expected: usize = shapes.iter().map(|&(r, c)| r * c).sum();
        if flat.len() != expected {
            return Err(Error::dimension(format!(
                "flat vector of length {} cannot fill {} parameters",
                flat.len(),
                expected
            )));
        }
        let mut pos = 0;
        set.for_each_block_mut(|m| {
            let len = m.len();
            m.data_mut().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        });
        Ok(set)
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut Matrix)) {
        for l in &mut self.layers {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> GradientSet {
        GradientSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: l.weight.map(&mut f),
                    bias: l.bias.map(&mut f),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        self.zip_apply(other, |a, b| *a += b)
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_block_mut(|m| {
            for v in m.data_mut() {
                *v *= s;
            }
        });
    }

    pub fn zip_apply(
        &mut self,
        other: &GradientSet,
        f: impl Fn(&mut f64, f64) + Copy,
    ) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::dimension("value sets are not shape-congruent"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                f(x, y);
            }
            for (x, &y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                f(x, y);
            }
        }
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &GradientSet,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<GradientSet> {
        let mut out = self.clone();
        out.zip_apply(other, |a, b| *a = f(*a, b))?;
        Ok(out)
    }

    pub fn snap_f32(&mut self) {
        self.for_each_block_mut(Matrix::snap_f32);
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks()
            .flat_map(|m| m.data())
            .map(|&v| v * v)
            .sum()
    }
}

fn affine(layer: &Layer, input: &Matrix) -> Result<Matrix> {
    if input.cols() != layer.weight.cols() {
        return Err(Error::dimension(format!(
            "input width {} does not match layer fan-in {}",
            input.cols(),
            layer.weight.cols()
        )));
    }
    let n = input.rows();
    let out_dim = layer.weight.rows();
    let mut out = Matrix::zeros(n, out_dim);
    for s in 0..n {
        let x = input.row(s);
        for o in 0..out_dim {
            let mut acc = layer.bias.data()[o];
            for (w, xi) in layer.weight.row(o).iter().zip(x) {
                acc += w * xi;
            }
            out.row_mut(s)[o] = acc;
        }
    }
    Ok(out)
}

/// Batch forward pass producing raw logits (no output activation).
/// Read-only and thread-pure: concurrent calls on one model agree bitwise.
pub fn forward(model: &MlpModel, batch: &Matrix) -> Result<Matrix> {
    let mut current = batch.clone();
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate() {
        let mut pre = affine(layer, &current)?;
        if i < last {
            for v in pre.data_mut() {
                *v = model.activation.apply(*v);
            }
        }
        current = pre;
    }
    Ok(current)
}

struct ForwardCache {
    /// acts[0] is the input batch; acts[l] is the activated output of layer l-1.
    acts: Vec<Matrix>,
    /// Pre-activation values per layer; the final entry holds the logits.
    pres: Vec<Matrix>,
}

fn forward_cached(model: &MlpModel, batch: &Matrix) -> Result<ForwardCache> {
    let last = model.layers.len() - 1;
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    let mut pres = Vec::with_capacity(model.layers.len());
    acts.push(batch.clone());
    for (i, layer) in model.layers.iter().enumerate() {
        let pre = affine(layer, acts.last().unwrap())?;
        if i < last {
            let act = pre.map(|v| model.activation.apply(v));
            pres.push(pre);
            acts.push(act);
        } else {
            pres.push(pre);
        }
    }
    Ok(ForwardCache { acts, pres })
}

fn check_batch(model: &MlpModel, batch: &Matrix, labels: &[u8]) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::domain("empty batch"));
    }
    if batch.rows() != labels.len() {
        return Err(Error::dimension(format!(
            "batch of {} rows with {} labels",
            batch.rows(),
            labels.len()
        )));
    }
    if batch.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("batch contains a non-finite feature"));
    }
    let classes = model.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| usize::from(y) >= classes) {
        return Err(Error::domain(format!(
            "label {bad} outside the model's {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch plus its exact gradient.
/// The logit-layer gradient is (softmax - one_hot) / batch_size; duplicating
/// every sample therefore leaves both outputs unchanged.
pub fn loss_and_gradient(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[u8],
) -> Result<(f64, GradientSet)> {
    check_batch(model, batch, labels)?;
    let n = batch.rows();
    let cache = forward_cached(model, batch)?;
    let logits = cache.pres.last().unwrap();
    let classes = model.output_dim();

    let mut loss = 0.0;
    // delta starts as d(loss)/d(logits).
    let mut delta = Matrix::zeros(n, classes);
    for s in 0..n {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let y = usize::from(labels[s]);
        loss += log_z - row[y];
        let drow = delta.row_mut(s);
        for c in 0..classes {
            drow[c] = ((row[c] - max).exp() / sum_exp) / n as f64;
        }
        drow[y] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    let mut grad = GradientSet::zeros_like(model);
    for l in (0..model.layers.len()).rev() {
        let input = &cache.acts[l];
        {
            let lg = &mut grad.layers[l];
            for s in 0..n {
                let d = delta.row(s);
                let x = input.row(s);
                for (o, &ds) in d.iter().enumerate() {
                    if ds != 0.0 {
                        for (gw, &xi) in lg.weight.row_mut(o).iter_mut().zip(x) {
                            *gw += ds * xi;
                        }
                    }
                    lg.bias.data_mut()[o] += ds;
                }
            }
        }
        if l > 0 {
            let layer = &model.layers[l];
            let pre = &cache.pres[l - 1];
            let mut prev = Matrix::zeros(n, layer.weight.cols());
            for s in 0..n {
                let d = delta.row(s);
                let p = prev.row_mut(s);
                for (o, &ds) in d.iter().enumerate() {
                    if ds != 0.0 {
                        for (pv, &w) in p.iter_mut().zip(layer.weight.row(o)) {
                            *pv += ds * w;
                        }
                    }
                }
                for (pv, &pz) in p.iter_mut().zip(pre.row(s)) {
                    *pv *= model.activation.derivative(pz);
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grad))
}

/// Entrywise squared gradient of the log-likelihood of one sample.
/// The log-likelihood gradient is the negated single-sample loss gradient,
/// and squaring removes the sign, so this reuses the loss path directly.
pub fn per_sample_loglik_sqgrad(
    model: &MlpModel,
    features: &[f64],
    label: u8,
) -> Result<GradientSet> {
    let batch = Matrix::from_vec(1, features.len(), features.to_vec())?;
    let (_, grad) = loss_and_gradient(model, &batch, &[label])?;
    Ok(grad.map(|v| v * v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state. Adam keeps bias-corrected first/second moments that are
/// shape-congruent with the model; the step counter drives the correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Option<GradientSet>,
    v: Option<GradientSet>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn adam(learning_rate: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> OptimizerState {
        match kind {
            OptimizerKind::Sgd => OptimizerState::sgd(learning_rate),
            OptimizerKind::Adam => OptimizerState::adam(learning_rate),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one composed update `w` in place of the raw gradient:
/// SGD does `theta -= lr * w`; Adam feeds `w` through its moment estimates.
pub fn apply_update(model: &mut MlpModel, w: &GradientSet, opt: &mut OptimizerState) -> Result<()> {
    let params_shape = GradientSet::zeros_like(model);
    if !params_shape.congruent(w) {
        return Err(Error::dimension("update is not shape-congruent with model"));
    }
    match opt.kind {
        OptimizerKind::Sgd => {
            let lr = opt.learning_rate;
            opt.step += 1;
            for (layer, wl) in model.layers.iter_mut().zip(&w.layers) {
                for (p, &g) in layer.weight.data_mut().iter_mut().zip(wl.weight.data()) {
                    *p -= lr * g;
                }
                for (p, &g) in layer.bias.data_mut().iter_mut().zip(wl.bias.data()) {
                    *p -= lr * g;
                }
            }
        }
        OptimizerKind::Adam => {
            if opt.m.is_none() {
                opt.m = Some(params_shape.clone());
                opt.v = Some(params_shape);
            }
            let m = opt.m.as_mut().unwrap();
            let v = opt.v.as_mut().unwrap();
            if !m.congruent(w) {
                return Err(Error::dimension("optimizer moments do not match update"));
            }
            opt.step += 1;
            let t = opt.step as i32;
            let (b1, b2) = (opt.beta1, opt.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let lr = opt.learning_rate;
            let eps = opt.epsilon;
            for ((layer, wl), (ml, vl)) in model
                .layers
                .iter_mut()
                .zip(&w.layers)
                .zip(m.layers.iter_mut().zip(v.layers.iter_mut()))
            {
                let blocks = [
                    (
                        layer.weight.data_mut(),
                        wl.weight.data(),
                        ml.weight.data_mut(),
                        vl.weight.data_mut(),
                    ),
                    (
                        layer.bias.data_mut(),
                        wl.bias.data(),
                        ml.bias.data_mut(),
                        vl.bias.data_mut(),
                    ),
                ];
                for (p_data, g_data, m_data, v_data) in blocks {
                    for i in 0..p_data.len() {
                        let g = g_data[i];
                        m_data[i] = b1 * m_data[i] + (1.0 - b1) * g;
                        v_data[i] = b2 * v_data[i] + (1.0 - b2) * g * g;
                        let m_hat = m_data[i] / c1;
                        let v_hat = v_data[i] / c2;
                        p_data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RGMW";
const CHECKPOINT_VERSION: u16 = 1;

/// Writes a model checkpoint: magic "RGMW", version u16, layer count u16,
/// then per layer rows u32, cols u32, weight entries f32, bias entries f32,
/// all little-endian. The activation is runtime configuration, not stored.
pub fn write_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u16(model.layer_count() as u16);
    for l in &model.layers {
        w.u32(l.weight.rows() as u32);
        w.u32(l.weight.cols() as u32);
        w.f32_block(l.weight.data().iter().copied());
        w.f32_block(l.bias.data().iter().copied());
    }
    write_file(path, &w.into_bytes())
}

/// Reads a checkpoint written by `write_checkpoint`. The restored model uses
/// the default ReLU activation; override with `with_activation` if needed.
pub fn read_checkpoint(path: &Path) -> Result<MlpModel> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let layer_count = r.u16("layer count")?;
    if layer_count == 0 {
        return Err(Error::format(6, "checkpoint has zero layers"));
    }
    let mut layers = Vec::with_capacity(usize::from(layer_count));
    let mut prev_out: Option<usize> = None;
    for i in 0..layer_count {
        let rows = r.u32("layer rows")? as usize;
        let cols = r.u32("layer cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::format(
                r.offset(),
                format!("layer {i} has empty shape {rows}x{cols}"),
            ));
        }
        if let Some(p) = prev_out {
            if cols != p {
                return Err(Error::format(
                    r.offset(),
                    format!("layer {i} fan-in {cols} does not chain from width {p}"),
                ));
            }
        }
        prev_out = Some(rows);
        let weight = Matrix::from_vec(rows, cols, r.f32_block(rows * cols, "weights")?)?;
        let bias = Matrix::from_vec(rows, 1, r.f32_block(rows, "biases")?)?;
        layers.push(Layer { weight, bias });
    }
    r.finish("checkpoint")?;
    Ok(MlpModel {
        layers,
        activation: Activation::Relu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn tiny_model(dims: &[usize], seed: u64) -> MlpModel {
        build_model(dims, &mut Rng::stream(seed, 0x7e57)).unwrap()
    }

    #[test]
    fn identity_layer_passes_logits_through() {
        // Single linear layer with identity weights: logits equal the input,
        // including the negative coordinate (no activation on the output).
        let mut model = tiny_model(&[2, 2], 1);
        model.layers_mut()[0].weight =
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.layers_mut()[0].bias = Matrix::zeros(2, 1);
        let batch = Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap();
        let logits = forward(&model, &batch).unwrap();
        assert_eq!(logits.data(), &[3.0, -1.0]);
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let model = tiny_model(&[3, 4, 2], 5);
        let mut rng = Rng::stream(5, 0xf00d);
        let batch =
            Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let logits = forward(&model, &batch).unwrap();
        for s in 0..4 {
            // Recompute one sample by hand, neuron by neuron.
            let x = batch.row(s);
            let l0 = &model.layers()[0];
            let mut h = vec![0.0; 4];
            for (o, hv) in h.iter_mut().enumerate() {
                let z = dot(l0.weight.row(o), x).unwrap() + l0.bias.get(o, 0);
                *hv = if z > 0.0 { z } else { 0.0 };
            }
            let l1 = &model.layers()[1];
            for c in 0..2 {
                let z = dot(l1.weight.row(c), &h).unwrap() + l1.bias.get(c, 0);
                assert!((logits.get(s, c) - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln_two() {
        let mut model = tiny_model(&[3, 2], 2);
        model.layers_mut()[0].weight = Matrix::zeros(2, 3);
        model.layers_mut()[0].bias = Matrix::zeros(2, 1);
        let batch = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let (loss, _) = loss_and_gradient(&model, &batch, &[0, 1]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_changes_nothing() {
        let model = tiny_model(&[4, 5, 3], 3);
        let mut rng = Rng::stream(3, 0xbeef);
        let rows: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let batch = Matrix::from_vec(2, 4, rows.clone()).unwrap();
        let doubled =
            Matrix::from_vec(4, 4, [rows.clone(), rows].concat()).unwrap();
        let (l1, g1) = loss_and_gradient(&model, &batch, &[0, 2]).unwrap();
        let (l2, g2) = loss_and_gradient(&model, &doubled, &[0, 2, 0, 2]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let dims = [3usize, 6, 4, 2];
        let mut model = tiny_model(&dims, 11);
        let mut rng = Rng::stream(11, 0xd1ff);
        let batch =
            Matrix::from_vec(5, 3, (0..15).map(|_| rng.uniform(-1.5, 1.5)).collect()).unwrap();
        let labels = [0u8, 1, 1, 0, 1];
        let (_, grad) = loss_and_gradient(&model, &batch, &labels).unwrap();
        let analytic = grad.flatten();
        let h = 1e-6;
        let shapes = model.block_shapes();
        let theta = model.params().flatten();
        let mut max_rel: f64 = 0.0;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let mut eval = |flat: &[f64]| {
                let p = GradientSet::from_flat(&shapes, flat).unwrap();
                for (l, pl) in model.layers_mut().iter_mut().zip(&p.layers) {
                    l.weight = pl.weight.clone();
                    l.bias = pl.bias.clone();
                }
                loss_and_gradient(&model, &batch, &labels).unwrap().0
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-3);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn sqgrad_is_square_of_single_sample_gradient() {
        let model = tiny_model(&[3, 4, 2], 7);
        let feats = [0.3, -0.8, 1.1];
        let sq = per_sample_loglik_sqgrad(&model, &feats, 1).unwrap();
        let batch = Matrix::from_vec(1, 3, feats.to_vec()).unwrap();
        let (_, g) = loss_and_gradient(&model, &batch, &[1]).unwrap();
        for (a, b) in sq.flatten().iter().zip(g.flatten()) {
            assert_eq!(*a, b * b);
        }
    }

    #[test]
    fn confident_correct_sample_has_vanishing_sqgrad() {
        // Drive one logit far above the other so softmax is one-hot to within
        // double precision; the squared log-likelihood gradient then vanishes.
        let mut model = tiny_model(&[2, 2], 9);
        model.layers_mut()[0].weight =
            Matrix::from_vec(2, 2, vec![40.0, 0.0, -40.0, 0.0]).unwrap();
        let sq = per_sample_loglik_sqgrad(&model, &[1.0, 0.0], 0).unwrap();
        assert!(sq.flatten().iter().all(|&v| v < 1e-30));
    }

    #[test]
    fn label_out_of_range_is_a_domain_error() {
        let model = tiny_model(&[2, 2], 4);
        let batch = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            loss_and_gradient(&model, &batch, &[2]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            loss_and_gradient(&model, &Matrix::zeros(0, 2), &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nan_features_are_a_numeric_error() {
        let model = tiny_model(&[2, 2], 4);
        let mut batch = Matrix::zeros(1, 2);
        batch.data_mut()[0] = f64::NAN;
        assert!(matches!(
            loss_and_gradient(&model, &batch, &[0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sgd_step_is_theta_minus_lr_w() {
        let mut model = tiny_model(&[2, 2], 6);
        let before = model.params().flatten();
        let w = model.params().map(|_| 0.5);
        let mut opt = OptimizerState::sgd(0.2);
        apply_update(&mut model, &w, &mut opt).unwrap();
        for (b, a) in before.iter().zip(model.params().flatten()) {
            assert!((a - (b - 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_opposes_a_constant_update_direction() {
        // Independent scalar Adam simulation: with a constant w the update
        // direction settles to -sign(w) for every coordinate.
        let mut model = tiny_model(&[2, 3, 2], 8);
        let w = model.params().map(|v| if v >= 0.0 { 0.3 } else { -0.7 });
        let mut opt = OptimizerState::adam(1e-2);
        for _ in 0..5 {
            let before = model.params().flatten();
            apply_update(&mut model, &w, &mut opt).unwrap();
            let after = model.params().flatten();
            for ((b, a), g) in before.iter().zip(&after).zip(w.flatten()) {
                assert!(
                    ((a - b) * g.signum()) < 0.0,
                    "step moved with the update direction"
                );
            }
        }
        // Cross-check one coordinate against a scalar re-implementation.
        let g = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut x = 0.0f64;
        for t in 1..=5 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((x - 5.0 * -1e-2 * 0.3 / (0.3 + 1e-8)).abs() < 1e-4);
    }

    #[test]
    fn flatten_round_trips_exactly() {
        let model = tiny_model(&[3, 5, 4, 2], 13);
        let g = model.params();
        let flat = g.flatten();
        let back = GradientSet::from_flat(&g.block_shapes(), &flat).unwrap();
        assert_eq!(g, back);
        assert_eq!(flat.len(), model.param_count());
    }

    #[test]
    fn checkpoint_round_trips_bitwise_after_snap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgmw");
        let mut model = tiny_model(&[3, 4, 2], 21);
        model.snap_f32();
        write_checkpoint(&model, &path).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(model.param_hash(), loaded.param_hash());
        // Same write twice -> same bytes.
        let path2 = dir.path().join("model2.rgmw");
        write_checkpoint(&model, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgmw");
        let model = tiny_model(&[3, 4, 2], 22);
        write_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 0);
                assert!(message.contains("expected"), "message: {message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_thread_pure() {
        let model = tiny_model(&[4, 8, 2], 17);
        let mut rng = Rng::stream(17, 0xcafe);
        let batch =
            Matrix::from_vec(6, 4, (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let reference = forward(&model, &batch).unwrap();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..4)
                .map(|_| s.spawn(|| forward(&model, &batch).unwrap()))
                .collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), reference);
            }
        });
    }
}
