//! Dense classifiers (softmax regression and MLPs), local SGD with an optional
//! proximal term, and evaluation.
//!
//! Parameters are stored as `f32`; all arithmetic during training and
//! evaluation is carried out in `f64` and rounded back to `f32` only when a
//! [`ParamVector`] is produced.
//!
//! Layer `l` maps `in_l -> out_l` and is stored as a row-major `out_l x in_l`
//! weight matrix followed by an `out_l` bias. The forward pass is
//! `z = W h + b`, followed by the activation on every layer but the last.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("malformed parameter encoding: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

/// Width multiplier for hidden layers, kept as an exact fraction so that
/// `ceil(ratio * width)` has no rounding ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WidthRatio {
    num: u32,
    den: u32,
}

impl WidthRatio {
    pub const FULL: WidthRatio = WidthRatio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, ModelError> {
        if den == 0 || num == 0 || num > den {
            return Err(ModelError::InvalidSpec(format!(
                "width ratio {num}/{den} is not in (0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(WidthRatio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn is_full(&self) -> bool {
        self.num == self.den
    }

    /// `ceil(ratio * width)`, never less than one.
    pub fn scale(&self, width: usize) -> usize {
        let w = width as u64 * self.num as u64;
        (w.div_ceil(self.den as u64) as usize).max(1)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for WidthRatio {
    fn default() -> Self {
        WidthRatio::FULL
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl PartialOrd for WidthRatio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for WidthRatio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num() as u64 * other.den() as u64).cmp(&(other.num() as u64 * self.den() as u64))
    }
}

impl fmt::Display for WidthRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthRatio {
    type Err = ModelError;

    /// Accepts `"a/b"` or a plain decimal such as `"0.25"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || ModelError::InvalidSpec(format!("cannot parse width ratio {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return WidthRatio::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac_v: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int * den + frac_v;
        let (num, den) = (u32::try_from(num).map_err(|_| bad())?, den as u32);
        WidthRatio::new(num, den)
    }
}

impl Serialize for WidthRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WidthRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Num(v) => format!("{v}"),
            Raw::Text(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dimension, hidden widths, number of classes.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub width_ratio: WidthRatio,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            layer_widths,
            activation,
            width_ratio: WidthRatio::FULL,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn softmax_regression(input: usize, classes: usize) -> Result<Self, ModelError> {
        ModelSpec::new(vec![input, classes], Activation::None)
    }

    /// One-hidden-layer MLP whose parameter count is as close to `target`
    /// as a whole number of hidden units allows.
    pub fn mlp_with_params(
        input: usize,
        classes: usize,
        target: usize,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        // params = h * (input + 1 + classes) + classes
        let per_unit = (input + 1 + classes) as f64;
        let h = ((target as f64 - classes as f64) / per_unit)
            .round()
            .max(1.0) as usize;
        ModelSpec::new(vec![input, h, classes], activation)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_widths.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "at least an input and an output width are required".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(ModelError::InvalidSpec("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Same architecture at a different hidden-width ratio.
    pub fn with_ratio(&self, ratio: WidthRatio) -> ModelSpec {
        ModelSpec {
            width_ratio: ratio,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Layer widths after applying `width_ratio` to the hidden layers.
    pub fn effective_widths(&self) -> Vec<usize> {
        let last = self.layer_widths.len() - 1;
        self.layer_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i == 0 || i == last {
                    w
                } else {
                    self.width_ratio.scale(w)
                }
            })
            .collect()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.effective_widths()
            .windows(2)
            .map(|w| LayerShape {
                rows: w[1],
                cols: w[0],
                bias: w[1],
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(LayerShape::len).sum()
    }
}

/// Shape of one dense layer: `rows x cols` weights plus a `bias`-long bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model parameters with per-layer shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    shapes: Vec<LayerShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, shapes: Vec<LayerShape>) -> Result<Self, ModelError> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if expected != values.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "shapes describe {expected} values but {} were given",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::ShapeMismatch(format!(
                "value at index {i} is not finite"
            )));
        }
        Ok(ParamVector { values, shapes })
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        let n = shapes.iter().map(LayerShape::len).sum();
        ParamVector {
            values: vec![0.0; n],
            shapes,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn from_f64(values: &[f64], shapes: Vec<LayerShape>) -> Self {
        ParamVector {
            values: values.iter().map(|&v| v as f32).collect(),
            shapes,
        }
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let want = spec.shapes();
        if want != self.shapes {
            return Err(ModelError::ShapeMismatch(format!(
                "parameters have shapes {:?}, model expects {:?}",
                self.shapes, want
            )));
        }
        Ok(())
    }

    /// Size of [`ParamVector::encode_into`] output in bytes.
    pub fn encoded_len(&self) -> usize {
        4 + 12 * self.shapes.len() + 4 * self.values.len()
    }

    /// Layer count, then `(rows, cols, bias)` as `u32` LE per layer, then the
    /// values as `f32` LE.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for s in &self.shapes {
            for d in [s.rows, s.cols, s.bias] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one vector from the front of `buf`, returning it with the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), ModelError> {
        let mut pos = 0usize;
        let next_u32 = |pos: &mut usize| -> Result<u32, ModelError> {
            let bytes = buf
                .get(*pos..*pos + 4)
                .ok_or_else(|| ModelError::Decode("truncated parameter header".into()))?;
            *pos += 4;
            Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
        };
        let layers = next_u32(&mut pos)? as usize;
        // each layer header is 12 bytes; refuse counts the buffer cannot hold
        if layers > buf.len() / 12 {
            return Err(ModelError::Decode(format!(
                "layer count {layers} exceeds buffer"
            )));
        }
        let mut shapes = Vec::with_capacity(layers);
        let mut total: u64 = 0;
        for _ in 0..layers {
            let rows = next_u32(&mut pos)? as usize;
            let cols = next_u32(&mut pos)? as usize;
            let bias = next_u32(&mut pos)? as usize;
            let len = (rows as u64)
                .checked_mul(cols as u64)
                .and_then(|v| v.checked_add(bias as u64))
                .ok_or_else(|| ModelError::Decode("layer size overflow".into()))?;
            total = total
                .checked_add(len)
                .ok_or_else(|| ModelError::Decode("parameter count overflow".into()))?;
            shapes.push(LayerShape { rows, cols, bias });
        }
        let remaining = (buf.len() - pos) as u64;
        if total.saturating_mul(4) > remaining {
            return Err(ModelError::Decode(format!(
                "header announces {total} values but only {remaining} bytes remain"
            )));
        }
        let values: Vec<f32> = buf[pos..pos + 4 * total as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * total as usize;
        let pv = ParamVector::new(values, shapes).map_err(|e| ModelError::Decode(e.to_string()))?;
        Ok((pv, pos))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Proximal coefficient; zero means plain local SGD.
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.local_epochs == 0 {
            return Err(ModelError::InvalidConfig(
                "local_epochs must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be >= 0".into(),
            ));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(ModelError::InvalidConfig("mu must be >= 0".into()));
        }
        Ok(())
    }

    /// Mini-batches per call to [`local_train`] for a dataset of `n` samples.
    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size) * self.local_epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub num_examples: usize,
    /// Mean mini-batch objective over the final epoch.
    pub train_loss: f64,
    pub num_batches: usize,
}

/// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let shapes = spec.shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.num_params());
    for s in &shapes {
        let bound = 1.0 / (s.cols as f64).sqrt();
        for _ in 0..s.len() {
            values.push(rng.random_range(-bound..=bound) as f32);
        }
    }
    ParamVector { values, shapes }
}

/// `(mu / 2) * ||w - w_global||^2`.
pub fn proximal_penalty(
    w: &ParamVector,
    w_global: &ParamVector,
    mu: f64,
) -> Result<f64, ModelError> {
    if w.len() != w_global.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "proximal term over vectors of length {} and {}",
            w.len(),
            w_global.len()
        )));
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    let sq: f64 = w
        .values
        .iter()
        .zip(&w_global.values)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(0.5 * mu * sq)
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<(), ModelError> {
    if data.dim() != spec.input_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            spec.input_dim()
        )));
    }
    if data.num_classes() > spec.num_classes() {
        return Err(ModelError::ShapeMismatch(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes(),
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy of `params` on `data`.
pub fn evaluate(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<(f64, f64), ModelError> {
    params.check_spec(spec)?;
    check_data(spec, data)?;
    let net = Network::new(params.shapes(), spec.activation);
    let w = params.to_f64();
    let mut scratch = Scratch::new(params.shapes());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        net.forward(&w, x, &mut scratch);
        let logits = scratch.acts.last().unwrap();
        loss += cross_entropy(logits, y as usize);
        if argmax(logits) == y as usize {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Local mini-batch SGD on cross-entropy plus `(mu/2)||w - global||^2`.
///
/// Each epoch reshuffles with a generator seeded from `cfg.seed`; the final
/// partial batch is kept.
pub fn local_train(
    global: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    global.check_spec(spec)?;
    check_data(spec, data)?;
    cfg.validate()?;
    let shapes = global.shapes().to_vec();
    let net = Network::new(&shapes, spec.activation);
    let anchor = global.to_f64();
    let mut w = anchor.clone();
    let prox = (cfg.mu != 0.0).then_some((anchor.as_slice(), cfg.mu));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; w.len()];
    let mut scratch = Scratch::new(&shapes);
    let mut epoch_loss = 0.0;
    let mut batches = 0;
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = net.loss_and_grad(&w, data, chunk, prox, &mut grad, &mut scratch);
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: b });
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.learning_rate * gi;
            }
            epoch_loss += loss;
            epoch_batches += 1;
        }
        batches += epoch_batches;
        epoch_loss /= epoch_batches as f64;
    }
    if let Some(i) = w.iter().position(|v| !(*v as f32).is_finite()) {
        return Err(ModelError::Diverged {
            epoch: cfg.local_epochs - 1,
            batch: i,
        });
    }
    Ok(TrainOutcome {
        params: ParamVector::from_f64(&w, shapes),
        num_examples: data.len(),
        train_loss: epoch_loss,
        num_batches: batches,
    })
}

/// Objective and gradient on a subset of `data`, in `f64`.
///
/// Exposed for gradient checking and for callers that run their own optimizer.
pub fn loss_and_grad(
    params: &[f64],
    spec: &ModelSpec,
    data: &Dataset,
    indices: &[usize],
    prox: Option<(&[f64], f64)>,
) -> (f64, Vec<f64>) {
    let shapes = spec.shapes();
    let net = Network::new(&shapes, spec.activation);
    let mut grad = vec![0.0; params.len()];
    let mut scratch = Scratch::new(&shapes);
    let loss = net.loss_and_grad(params, data, indices, prox, &mut grad, &mut scratch);
    (loss, grad)
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Network<'a> {
    shapes: &'a [LayerShape],
    offsets: Vec<usize>,
    activation: Activation,
}

struct Scratch {
    /// acts[0] is the input, acts[l + 1] the output of layer l.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(shapes: &[LayerShape]) -> Self {
        let mut acts = vec![vec![0.0; shapes[0].cols]];
        acts.extend(shapes.iter().map(|s| vec![0.0; s.rows]));
        let deltas = shapes.iter().map(|s| vec![0.0; s.rows]).collect();
        Scratch { acts, deltas }
    }
}

impl<'a> Network<'a> {
    fn new(shapes: &'a [LayerShape], activation: Activation) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in shapes {
            offsets.push(off);
            off += s.len();
        }
        Network {
            shapes,
            offsets,
            activation,
        }
    }

    fn forward(&self, w: &[f64], x: &[f32], scratch: &mut Scratch) {
        for (a, &v) in scratch.acts[0].iter_mut().zip(x) {
            *a = v as f64;
        }
        let last = self.shapes.len() - 1;
        for (l, s) in self.shapes.iter().enumerate() {
            let off = self.offsets[l];
            let (weights, bias) = w[off..off + s.len()].split_at(s.rows * s.cols);
            let (prev, rest) = scratch.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            for r in 0..s.rows {
                let row = &weights[r * s.cols..(r + 1) * s.cols];
                let mut z = bias[r];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out[r] = if l < last && self.activation == Activation::Relu {
                    z.max(0.0)
                } else {
                    z
                };
            }
        }
    }

    fn loss_and_grad(
        &self,
        w: &[f64],
        data: &Dataset,
        indices: &[usize],
        prox: Option<(&[f64], f64)>,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv_n = 1.0 / indices.len() as f64;
        let last = self.shapes.len() - 1;
        let mut loss = 0.0;
        for &i in indices {
            let (x, y) = data.sample(i);
            self.forward(w, x, scratch);
            let logits = &scratch.acts[last + 1];
            loss += cross_entropy(logits, y as usize);

            // d(CE)/dz = softmax(z) - onehot(y)
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for (k, d) in scratch.deltas[last].iter_mut().enumerate() {
                *d = (logits[k] - max).exp() / denom - if k == y as usize { 1.0 } else { 0.0 };
            }

            for l in (0..=last).rev() {
                let s = self.shapes[l];
                let off = self.offsets[l];
                let input = &scratch.acts[l];
                let delta = &scratch.deltas[l];
                {
                    let (gw, gb) = grad[off..off + s.len()].split_at_mut(s.rows * s.cols);
                    for r in 0..s.rows {
                        let d = delta[r] * inv_n;
                        gb[r] += d;
                        for (g, xi) in gw[r * s.cols..(r + 1) * s.cols].iter_mut().zip(input) {
                            *g += d * xi;
                        }
                    }
                }
                if l > 0 {
                    let weights = &w[off..off + s.rows * s.cols];
                    let (lower, upper) = scratch.deltas.split_at_mut(l);
                    let prev_delta = &mut lower[l - 1];
                    let delta = &upper[0];
                    for c in 0..s.cols {
                        let mut acc = 0.0;
                        for r in 0..s.rows {
                            acc += weights[r * s.cols + c] * delta[r];
                        }
                        let gate = match self.activation {
                            Activation::Relu => (scratch.acts[l][c] > 0.0) as u8 as f64,
                            Activation::None => 1.0,
                        };
                        prev_delta[c] = acc * gate;
                    }
                }
            }
        }
        loss *= inv_n;
        if let Some((anchor, mu)) = prox {
            let mut sq = 0.0;
            for ((g, wi), ai) in grad.iter_mut().zip(w).zip(anchor) {
                let d = wi - ai;
                sq += d * d;
                *g += mu * d;
            }
            loss += 0.5 * mu * sq;
        }
        loss
    }
}
