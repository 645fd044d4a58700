//! Multilayer perceptron over a flat parameter vector.
//!
//! Every parameter of the network lives in one contiguous [`ParameterVector`].
//! Layer `l` occupies a weight block of `fan_out * fan_in` entries stored
//! row-major (row = output unit, column = input unit) followed by `fan_out`
//! bias entries; layers are laid out in order from input to output. The
//! output layer is affine (logits for classification, a scalar for
//! regression) and every hidden layer applies the configured activation.
//!
//! Losses and gradients are pure functions of `(params, sample, spec)`, so
//! callers may evaluate them concurrently over samples.

use std::borrow::Borrow;
use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Classification => f.write_str("classification"),
            Task::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Flat parameter storage shared by the online and reference models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Panics if the lengths differ.
    pub fn dot(&self, other: &ParameterVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`. Panics if the lengths differ.
    pub fn sub(&self, other: &ParameterVector) -> ParameterVector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        ParameterVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, factor: f64) -> ParameterVector {
        ParameterVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * other`. Panics if the lengths differ.
    pub fn add_scaled(&mut self, factor: f64, other: &ParameterVector) {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// One training example together with its persistent selection score.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub target: Target,
    pub score: f64,
}

impl Sample {
    pub fn new(id: usize, features: Vec<f64>, target: Target) -> Self {
        Self {
            id,
            features,
            target,
            score: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub task: Task,
    pub activation: Activation,
}

/// Position of one layer's weights and biases inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Structured (unflattened) view of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out` rows of `fan_in` weights each.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        task: Task,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            task,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::precondition("input_dim must be positive"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::precondition("hidden layer widths must be positive"));
        }
        match self.task {
            Task::Classification if self.output_dim < 2 => Err(Error::precondition(
                "classification requires output_dim >= 2",
            )),
            Task::Regression if self.output_dim != 1 => {
                Err(Error::precondition("regression requires output_dim == 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);

        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |l| l.bias.end)
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        check_len("parameter vector", self.param_count(), params.len())
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        check_len("sample features", self.input_dim, sample.features.len())?;
        match (self.task, sample.target) {
            (Task::Classification, Target::Class(c)) if c < self.output_dim => Ok(()),
            (Task::Classification, Target::Class(c)) => Err(Error::precondition(format!(
                "class index {c} out of range for {} outputs",
                self.output_dim
            ))),
            (Task::Regression, Target::Value(_)) => Ok(()),
            (task, target) => Err(Error::precondition(format!(
                "target {target:?} does not match {task} task"
            ))),
        }
    }
}

pub fn unflatten(spec: &ModelSpec, params: &ParameterVector) -> Result<Vec<Layer>> {
    spec.check_params(params)?;
    let values = params.as_slice();
    Ok(spec
        .layout()
        .into_iter()
        .map(|l| Layer {
            weights: values[l.weights.clone()]
                .chunks(l.fan_in)
                .map(<[f64]>::to_vec)
                .collect(),
            bias: values[l.bias].to_vec(),
        })
        .collect())
}

pub fn flatten(spec: &ModelSpec, layers: &[Layer]) -> Result<ParameterVector> {
    let layout = spec.layout();
    check_len("layer count", layout.len(), layers.len())?;
    let mut out = Vec::with_capacity(spec.param_count());
    for (l, layer) in layout.iter().zip(layers) {
        check_len("layer rows", l.fan_out, layer.weights.len())?;
        for row in &layer.weights {
            check_len("layer columns", l.fan_in, row.len())?;
            out.extend_from_slice(row);
        }
        check_len("layer bias", l.fan_out, layer.bias.len())?;
        out.extend_from_slice(&layer.bias);
    }
    Ok(ParameterVector(out))
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    for l in spec.layout() {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut values[l.weights] {
            *w = dist.sample(&mut rng);
        }
    }
    ParameterVector(values)
}

/// Activations of every layer for one input; `post[0]` is the input itself
/// and the last entry of `post` holds the raw outputs.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_trace(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Trace {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut pre = Vec::with_capacity(layout.len());
    let mut post = Vec::with_capacity(layout.len() + 1);
    post.push(input.to_vec());
    for (idx, l) in layout.iter().enumerate() {
        let a = post.last().expect("input pushed");
        let w = &params[l.weights.clone()];
        let b = &params[l.bias.clone()];
        let z: Vec<f64> = (0..l.fan_out)
            .map(|o| {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
            })
            .collect();
        let out = if idx == last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(out);
    }
    Trace { pre, post }
}

/// Numerically stable softmax (max logit subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn loss_from_outputs(spec: &ModelSpec, outputs: &[f64], target: Target) -> Result<f64> {
    let loss = match target {
        Target::Class(c) => log_sum_exp(outputs) - outputs[c],
        Target::Value(y) => {
            let diff = outputs[0] - y;
            diff * diff
        }
    };
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow(format!(
            "non-finite {} loss (outputs {outputs:?})",
            spec.task
        )));
    }
    // log-sum-exp can round a hair below the target logit.
    Ok(loss.max(0.0))
}

/// Raw network outputs: logits for classification, the prediction for
/// regression.
pub fn predict(params: &ParameterVector, features: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_len("sample features", spec.input_dim, features.len())?;
    let mut trace = forward_trace(spec, params.as_slice(), features);
    let outputs = trace.post.pop().expect("output layer");
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("non-finite network output".into()));
    }
    Ok(outputs)
}

pub fn forward_loss(params: &ParameterVector, sample: &Sample, spec: &ModelSpec) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_sample(sample)?;
    let trace = forward_trace(spec, params.as_slice(), &sample.features);
    loss_from_outputs(
        spec,
        trace.post.last().expect("output layer"),
        sample.target,
    )
}

/// Adds `scale * d loss / d params` into `grad` and returns the loss.
fn accumulate_gradient(
    spec: &ModelSpec,
    params: &[f64],
    sample: &Sample,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let trace = forward_trace(spec, params, &sample.features);
    let outputs = trace.post.last().expect("output layer");
    let loss = loss_from_outputs(spec, outputs, sample.target)?;

    let mut delta: Vec<f64> = match sample.target {
        Target::Class(c) => {
            let mut p = softmax(outputs);
            p[c] -= 1.0;
            p
        }
        Target::Value(y) => vec![2.0 * (outputs[0] - y)],
    };

    let layout = spec.layout();
    for (idx, l) in layout.iter().enumerate().rev() {
        let input = &trace.post[idx];
        let w_grad = &mut grad[l.weights.clone()];
        for (o, d) in delta.iter().enumerate() {
            let sd = scale * d;
            for (g, a) in w_grad[o * l.fan_in..(o + 1) * l.fan_in]
                .iter_mut()
                .zip(input)
            {
                *g += sd * a;
            }
        }
        for (g, d) in grad[l.bias.clone()].iter_mut().zip(&delta) {
            *g += scale * d;
        }
        if idx == 0 {
            break;
        }
        let w = &params[l.weights.clone()];
        let z_prev = &trace.pre[idx - 1];
        delta = (0..l.fan_in)
            .map(|i| {
                let back: f64 = delta
                    .iter()
                    .enumerate()
                    .map(|(o, d)| w[o * l.fan_in + i] * d)
                    .sum();
                back * spec.activation.derivative(z_prev[i], input[i])
            })
            .collect();
    }
    Ok(loss)
}

pub fn loss_and_gradient(
    params: &ParameterVector,
    sample: &Sample,
    spec: &ModelSpec,
) -> Result<(f64, ParameterVector)> {
    spec.check_params(params)?;
    spec.check_sample(sample)?;
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate_gradient(spec, params.as_slice(), sample, 1.0, &mut grad)?;
    Ok((loss, ParameterVector(grad)))
}

pub fn per_sample_gradient(
    params: &ParameterVector,
    sample: &Sample,
    spec: &ModelSpec,
) -> Result<ParameterVector> {
    loss_and_gradient(params, sample, spec).map(|(_, g)| g)
}

/// Mean gradient and mean loss over `batch`, summed in iteration order.
pub fn batch_loss_and_gradient<I, S>(
    params: &ParameterVector,
    batch: I,
    spec: &ModelSpec,
) -> Result<(f64, ParameterVector)>
where
    I: IntoIterator<Item = S>,
    S: Borrow<Sample>,
{
    spec.check_params(params)?;
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for sample in batch {
        let sample = sample.borrow();
        spec.check_sample(sample)?;
        loss_sum += accumulate_gradient(spec, params.as_slice(), sample, 1.0, &mut grad)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::precondition(
            "batch_gradient requires a non-empty batch",
        ));
    }
    let n = count as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss_sum / n, ParameterVector(grad)))
}

pub fn batch_gradient<I, S>(
    params: &ParameterVector,
    batch: I,
    spec: &ModelSpec,
) -> Result<ParameterVector>
where
    I: IntoIterator<Item = S>,
    S: Borrow<Sample>,
{
    batch_loss_and_gradient(params, batch, spec).map(|(_, g)| g)
}
