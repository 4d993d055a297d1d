//! Small fully connected classifier with exact backpropagation.
//!
//! Parameters live in a single flat vector; each layer's weight matrix
//! (`out×in`, row-major) is followed by its bias. Hidden layers use ReLU and
//! the output layer emits raw logits.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigsyn::{LabeledDataset, SignalSample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl ArchSpec {
    /// MLP over a flattened `length×2` window.
    pub fn mlp(length: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            input_dim: 2 * length,
            hidden,
            output_dim: classes,
        }
    }

    /// Softmax regression (no hidden layers).
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            output_dim: classes,
        }
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Init {
    /// `N(0, 2/fan_in)` weights, zero biases.
    #[default]
    He,
    /// `N(0, σ²)` weights with a fixed σ, zero biases.
    Normal(f64),
    Zero,
}

impl Init {
    pub fn weight_std(self, fan_in: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: ArchSpec,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: ArchSpec) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            data: vec![0.0; n],
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn unflatten(arch: ArchSpec, flat: &[f64]) -> Result<Self> {
        let n = arch.param_count();
        if flat.len() != n {
            return Err(Error::dim(format!(
                "flat vector has {} entries, architecture needs {n}",
                flat.len()
            )));
        }
        Ok(Self {
            arch,
            data: flat.to_vec(),
        })
    }

    /// Same architecture, new values.
    pub fn with_values(&self, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != self.data.len() {
            return Err(Error::dim(format!(
                "expected {} values, got {}",
                self.data.len(),
                flat.len()
            )));
        }
        Ok(Self {
            arch: self.arch.clone(),
            data: flat,
        })
    }

    /// `(weights, bias)` slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, fan_in, fan_out) = self.layer_offset(l);
        let w_end = off + fan_in * fan_out;
        (&self.data[off..w_end], &self.data[w_end..w_end + fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (off, fan_in, fan_out) = self.layer_offset(l);
        let w_end = off + fan_in * fan_out;
        let (w, rest) = self.data[off..w_end + fan_out].split_at_mut(w_end - off);
        (w, rest)
    }

    pub fn num_layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let dims = self.arch.layer_dims();
        let off = dims[..l].iter().map(|(i, o)| i * o + o).sum();
        let (fan_in, fan_out) = dims[l];
        (off, fan_in, fan_out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "architectures differ: {:?} vs {:?}",
                self.arch, other.arch
            )))
        }
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            arch: self.arch.clone(),
            data,
        })
    }

    pub fn scaled(&self, factor: f64) -> ModelParams {
        Self {
            arch: self.arch.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Loss and parameter gradient of a batch.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub param_grads: ModelParams,
    pub loss: f64,
}

pub fn init_model<R: Rng + ?Sized>(arch: ArchSpec, init: Init, rng: &mut R) -> Result<ModelParams> {
    arch.validate()?;
    let mut params = ModelParams::zeros(arch);
    if init == Init::Zero {
        return Ok(params);
    }
    for l in 0..params.num_layers() {
        let (fan_in, _) = params.arch.layer_dims()[l];
        let std = init.weight_std(fan_in);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let (w, _) = params.layer_mut(l);
        for v in w.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    Ok(params)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_input(params: &ModelParams, input: &[f64]) -> Result<()> {
    if input.len() != params.arch.input_dim {
        return Err(Error::dim(format!(
            "input has {} values, model expects {}",
            input.len(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

/// Pre-activations of every layer; the last entry is the logit vector.
fn forward_all(params: &ModelParams, input: &[f64]) -> Vec<Vec<f64>> {
    let n_layers = params.num_layers();
    let mut pre = Vec::with_capacity(n_layers);
    let mut act: Vec<f64> = input.to_vec();
    for l in 0..n_layers {
        let (w, b) = params.layer(l);
        let fan_in = act.len();
        let z: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(o, bias)| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                bias + row.iter().zip(&act).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect();
        if l + 1 < n_layers {
            act = z.iter().map(|v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    pre
}

pub fn forward_logits(params: &ModelParams, input: &[f64]) -> Result<Vec<f64>> {
    check_input(params, input)?;
    Ok(forward_all(params, input).pop().expect("at least one layer"))
}

pub fn predict(params: &ModelParams, input: &[f64]) -> Result<usize> {
    forward_logits(params, input).map(|z| argmax(&z))
}

/// Backpropagates one sample. Accumulates `scale·∂loss/∂θ` into `grads` (if
/// given) and returns `(loss, ∂loss/∂input)`.
fn backprop(
    params: &ModelParams,
    input: &[f64],
    label: usize,
    scale: f64,
    mut grads: Option<&mut ModelParams>,
    want_input_grad: bool,
) -> (f64, Vec<f64>) {
    let pre = forward_all(params, input);
    let n_layers = pre.len();
    let logits = &pre[n_layers - 1];
    let loss = cross_entropy(logits, label);
    let mut delta = softmax(logits);
    delta[label] -= 1.0;

    for l in (0..n_layers).rev() {
        let (w, _) = params.layer(l);
        let fan_out = delta.len();
        let act_prev: Vec<f64> = if l == 0 {
            input.to_vec()
        } else {
            pre[l - 1].iter().map(|v| v.max(0.0)).collect()
        };
        let fan_in = act_prev.len();
        if let Some(g) = grads.as_deref_mut() {
            let (gw, gb) = g.layer_mut(l);
            for o in 0..fan_out {
                let d = scale * delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (gv, a) in row.iter_mut().zip(&act_prev) {
                    *gv += d * a;
                }
            }
        }
        if l == 0 && !want_input_grad {
            break;
        }
        let mut back = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for (bv, wv) in back.iter_mut().zip(row) {
                *bv += d * wv;
            }
        }
        if l > 0 {
            for (bv, z) in back.iter_mut().zip(&pre[l - 1]) {
                if *z <= 0.0 {
                    *bv = 0.0;
                }
            }
        }
        delta = back;
    }
    let input_grad = if want_input_grad { delta } else { Vec::new() };
    (loss, input_grad)
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn loss_and_grads<'a, I>(params: &ModelParams, batch: I) -> Result<GradBundle>
where
    I: IntoIterator<Item = &'a SignalSample>,
{
    let batch: Vec<&SignalSample> = batch.into_iter().collect();
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ModelParams::zeros(params.arch.clone());
    let mut loss = 0.0;
    for s in batch {
        check_input(params, &s.iq)?;
        check_label(params, s.label)?;
        let (l, _) = backprop(params, &s.iq, s.label, scale, Some(&mut grads), false);
        loss += l;
    }
    Ok(GradBundle {
        param_grads: grads,
        loss: loss * scale,
    })
}

fn check_label(params: &ModelParams, label: usize) -> Result<()> {
    if label >= params.arch.output_dim {
        return Err(Error::dim(format!(
            "label {label} out of range for {} classes",
            params.arch.output_dim
        )));
    }
    Ok(())
}

/// Mean cross-entropy without gradients.
pub fn mean_loss<'a, I>(params: &ModelParams, data: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a SignalSample>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for s in data {
        total += cross_entropy(&forward_logits(params, &s.iq)?, s.label);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / n as f64)
}

/// Gradient of the cross-entropy of one sample with respect to its input.
pub fn input_gradient(params: &ModelParams, input: &[f64], label: usize) -> Result<Vec<f64>> {
    check_input(params, input)?;
    check_label(params, label)?;
    Ok(backprop(params, input, label, 0.0, None, true).1)
}

/// `params − lr·grads`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    params.check_shape(grads)?;
    let data = params.data.iter().zip(&grads.data).map(|(p, g)| p - lr * g).collect();
    Ok(ModelParams {
        arch: params.arch.clone(),
        data,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(params: &ModelParams, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in &dataset.samples {
        if predict(params, &s.iq)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// One pass of mini-batch SGD over `data` in a shuffled order.
pub fn train_epoch<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &LabeledDataset,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut current = params.clone();
    for chunk in order.chunks(batch_size) {
        let g = loss_and_grads(&current, chunk.iter().map(|&i| &data.samples[i]))?;
        current = sgd_step(&current, &g.param_grads, lr)?;
    }
    Ok(current)
}

const CKPT_MAGIC: &[u8; 4] = b"SGCK";
const CKPT_VERSION: u32 = 1;

/// Writes a checkpoint: magic `SGCK`, `u32` version, `u32` number of layer
/// widths `m`, `m` `u32` widths (input, hidden…, output), `u64` parameter
/// count, then the flat parameters as `f64`. All little-endian.
pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let arch = &params.arch;
    let mut widths = vec![arch.input_dim as u32];
    widths.extend(arch.hidden.iter().map(|&h| h as u32));
    widths.push(arch.output_dim as u32);
    let mut buf = Vec::with_capacity(24 + 4 * widths.len() + 8 * params.len());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: msg.to_string(),
    };
    let mut cur = crate::sigsyn::Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4) != Some(CKPT_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    if cur.u32() != Some(CKPT_VERSION) {
        return Err(bad("unsupported version"));
    }
    let m = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if m < 2 {
        return Err(bad("need at least input and output widths"));
    }
    let widths = (0..m)
        .map(|_| cur.u32().map(|w| w as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated header"))?;
    let arch = ArchSpec {
        input_dim: widths[0],
        hidden: widths[1..m - 1].to_vec(),
        output_dim: widths[m - 1],
    };
    let n = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
    if n != arch.param_count() {
        return Err(bad("parameter count does not match architecture"));
    }
    let data = (0..n)
        .map(|_| cur.f64())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated parameters"))?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    ModelParams::unflatten(arch, &data)
}
