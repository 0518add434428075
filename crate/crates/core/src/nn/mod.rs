//! Minimal feedforward/convolutional network engine: layer definitions,
//! forward pass, backpropagation training, and evaluation. Sized for the
//! contributor models used by the scenarios, not for production training.

mod data;
mod io;
mod train;

pub use data::{Example, LabeledDataset};
pub use io::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use train::{train, train_regression, EpochStats, Optimizer, TrainConfig, TrainOutcome};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// An activation value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Vector(Array1<f64>),
    /// Channels-first feature map `(channels, height, width)`.
    Image(Array3<f64>),
}

impl Value {
    pub fn shape(&self) -> InputShape {
        match self {
            Value::Vector(v) => InputShape::Vector(v.len()),
            Value::Image(m) => {
                let (c, h, w) = m.dim();
                InputShape::Image { channels: c, height: h, width: w }
            }
        }
    }

    pub fn zeros(shape: &InputShape) -> Value {
        match *shape {
            InputShape::Vector(n) => Value::Vector(Array1::zeros(n)),
            InputShape::Image { channels, height, width } => {
                Value::Image(Array3::zeros((channels, height, width)))
            }
        }
    }

    /// Row-major flattening (channel, then row, then column).
    pub fn flatten(&self) -> Array1<f64> {
        match self {
            Value::Vector(v) => v.clone(),
            Value::Image(m) => Array1::from_iter(m.iter().copied()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Vector(n) => n,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fully connected, `weights` is (out, in).
    Dense { weights: Array2<f64>, bias: Array1<f64> },
    /// Stride-1 2D convolution, kernels are `(out_c, in_c, kh, kw)`.
    Conv2d { kernels: Array4<f64>, bias: Array1<f64>, padding: Padding },
    /// Non-overlapping `size`x`size` pooling.
    Pool { kind: PoolKind, size: usize },
    Activation(Activation),
    Flatten,
    /// Softmax over the final vector; at most one, and only last.
    SoftmaxOutput,
}

/// Declarative architecture description; materialized by [`LayeredModel::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, kernel: [usize; 2], padding: Padding },
    Pool { pool: PoolKind, size: usize },
    Activation { activation: Activation },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    pub input_shape: InputShape,
    pub layers: Vec<Layer>,
}

fn pad_before(k: usize) -> usize {
    // stride-1 "same" padding, short side leading
    (k - 1) / 2
}

fn conv_out_dim(input: usize, k: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(input),
        Padding::Valid => {
            if input < k {
                Err(NnError::Shape(format!("input dim {input} smaller than kernel {k}")))
            } else {
                Ok(input - k + 1)
            }
        }
    }
}

pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = z.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

impl LayeredModel {
    /// Build a model from an architecture description with seeded uniform
    /// Glorot initialization (weights in ±sqrt(6/(fan_in+fan_out))).
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<LayeredModel> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut shape = arch.input;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            match *spec {
                LayerSpec::Dense { units } => {
                    let fan_in = match shape {
                        InputShape::Vector(n) => n,
                        InputShape::Image { .. } => {
                            return Err(NnError::InvalidModel(
                                "dense layer needs a flattened input".into(),
                            ))
                        }
                    };
                    let bound = (6.0 / (fan_in + units) as f64).sqrt();
                    let weights =
                        Array2::from_shape_fn((units, fan_in), |_| rng.random_range(-bound..bound));
                    layers.push(Layer::Dense { weights, bias: Array1::zeros(units) });
                    shape = InputShape::Vector(units);
                }
                LayerSpec::Conv { filters, kernel: [kh, kw], padding } => {
                    let (c, h, w) = match shape {
                        InputShape::Image { channels, height, width } => (channels, height, width),
                        InputShape::Vector(_) => {
                            return Err(NnError::InvalidModel(
                                "conv layer needs an image input".into(),
                            ))
                        }
                    };
                    let fan_in = c * kh * kw;
                    let fan_out = filters * kh * kw;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let kernels = Array4::from_shape_fn((filters, c, kh, kw), |_| {
                        rng.random_range(-bound..bound)
                    });
                    layers.push(Layer::Conv2d { kernels, bias: Array1::zeros(filters), padding });
                    shape = InputShape::Image {
                        channels: filters,
                        height: conv_out_dim(h, kh, padding)?,
                        width: conv_out_dim(w, kw, padding)?,
                    };
                }
                LayerSpec::Pool { pool, size } => {
                    let (c, h, w) = match shape {
                        InputShape::Image { channels, height, width } => (channels, height, width),
                        InputShape::Vector(_) => {
                            return Err(NnError::InvalidModel(
                                "pool layer needs an image input".into(),
                            ))
                        }
                    };
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(NnError::Shape(format!(
                            "pool size {size} does not divide {h}x{w}"
                        )));
                    }
                    layers.push(Layer::Pool { kind: pool, size });
                    shape = InputShape::Image { channels: c, height: h / size, width: w / size };
                }
                LayerSpec::Activation { activation } => {
                    layers.push(Layer::Activation(activation));
                }
                LayerSpec::Flatten => {
                    layers.push(Layer::Flatten);
                    shape = InputShape::Vector(shape.len());
                }
                LayerSpec::Softmax => {
                    layers.push(Layer::SoftmaxOutput);
                }
            }
        }
        let model = LayeredModel { input_shape: arch.input, layers };
        model.validate()?;
        Ok(model)
    }

    /// Adjacent shapes must be consistent (a zero input passes through) and
    /// softmax may appear at most once, in the last position.
    pub fn validate(&self) -> Result<()> {
        let softmax_count =
            self.layers.iter().filter(|l| matches!(l, Layer::SoftmaxOutput)).count();
        if softmax_count > 1 {
            return Err(NnError::InvalidModel("more than one softmax output".into()));
        }
        if softmax_count == 1 && !matches!(self.layers.last(), Some(Layer::SoftmaxOutput)) {
            return Err(NnError::InvalidModel("softmax output must be the final layer".into()));
        }
        self.forward(&Value::zeros(&self.input_shape))?;
        Ok(())
    }

    pub fn has_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::SoftmaxOutput))
    }

    pub fn has_max_pool(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Pool { kind: PoolKind::Max, .. }))
    }

    /// Output vector length (class count for classifiers).
    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.forward(&Value::zeros(&self.input_shape))?.len())
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, bias } => weights.len() + bias.len(),
                Layer::Conv2d { kernels, bias, .. } => kernels.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Deterministic class scores; a probability vector when the model ends
    /// with a softmax output.
    pub fn forward(&self, input: &Value) -> Result<Array1<f64>> {
        let mut value = self.apply_input_check(input)?;
        for layer in &self.layers {
            value = apply_layer(layer, &value)?;
        }
        match value {
            Value::Vector(v) => Ok(v),
            Value::Image(_) => Err(NnError::Shape("model output is not a vector".into())),
        }
    }

    fn apply_input_check(&self, input: &Value) -> Result<Value> {
        if input.shape() != self.input_shape {
            return Err(NnError::Shape(format!(
                "input shape {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(input.clone())
    }

    /// Activations feeding the final dense (output) layer.
    pub fn feature_vector(&self, input: &Value) -> Result<Array1<f64>> {
        let last_dense = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .ok_or_else(|| NnError::InvalidModel("model has no dense output layer".into()))?;
        let mut value = self.apply_input_check(input)?;
        for layer in &self.layers[..last_dense] {
            value = apply_layer(layer, &value)?;
        }
        match value {
            Value::Vector(v) => Ok(v),
            Value::Image(_) => Err(NnError::Shape("feature layer is not a vector".into())),
        }
    }

    /// Length of the feature vector without running real data through.
    pub fn feature_len(&self) -> Result<usize> {
        Ok(self.feature_vector(&Value::zeros(&self.input_shape))?.len())
    }

    /// Fraction of argmax-correct predictions; ties break toward the lowest
    /// class index.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        use rayon::prelude::*;
        let correct: usize = examples
            .par_iter()
            .map(|ex| {
                let scores = self.forward(&ex.input).expect("shape-checked dataset");
                (argmax(&scores) == ex.label) as usize
            })
            .sum();
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn apply_layer(layer: &Layer, value: &Value) -> Result<Value> {
    match (layer, value) {
        (Layer::Dense { weights, bias }, Value::Vector(v)) => {
            if weights.ncols() != v.len() {
                return Err(NnError::Shape(format!(
                    "dense expects input {} but got {}",
                    weights.ncols(),
                    v.len()
                )));
            }
            Ok(Value::Vector(weights.dot(v) + bias))
        }
        (Layer::Conv2d { kernels, bias, padding }, Value::Image(m)) => {
            Ok(Value::Image(conv2d(kernels, bias, *padding, m)?))
        }
        (Layer::Pool { kind, size }, Value::Image(m)) => Ok(Value::Image(pool(*kind, *size, m)?)),
        (Layer::Activation(act), v) => Ok(apply_activation(*act, v)),
        (Layer::Flatten, v) => Ok(Value::Vector(v.flatten())),
        (Layer::SoftmaxOutput, Value::Vector(v)) => Ok(Value::Vector(softmax(v))),
        (l, v) => Err(NnError::Shape(format!(
            "layer {} cannot consume a {:?}-shaped value",
            layer_name(l),
            v.shape()
        ))),
    }
}

fn layer_name(l: &Layer) -> &'static str {
    match l {
        Layer::Dense { .. } => "dense",
        Layer::Conv2d { .. } => "conv2d",
        Layer::Pool { .. } => "pool",
        Layer::Activation(_) => "activation",
        Layer::Flatten => "flatten",
        Layer::SoftmaxOutput => "softmax",
    }
}

fn apply_activation(act: Activation, value: &Value) -> Value {
    let f = match act {
        Activation::Sigmoid => |x: f64| 1.0 / (1.0 + (-x).exp()),
        Activation::Relu => |x: f64| x.max(0.0),
    };
    match value {
        Value::Vector(v) => Value::Vector(v.mapv(f)),
        Value::Image(m) => Value::Image(m.mapv(f)),
    }
}

pub(crate) fn conv2d(
    kernels: &Array4<f64>,
    bias: &Array1<f64>,
    padding: Padding,
    input: &Array3<f64>,
) -> Result<Array3<f64>> {
    let (out_c, in_c, kh, kw) = kernels.dim();
    let (c, h, w) = input.dim();
    if c != in_c {
        return Err(NnError::Shape(format!("conv expects {in_c} channels, got {c}")));
    }
    let oh = conv_out_dim(h, kh, padding)?;
    let ow = conv_out_dim(w, kw, padding)?;
    let (pad_y, pad_x) = match padding {
        Padding::Same => (pad_before(kh), pad_before(kw)),
        Padding::Valid => (0, 0),
    };
    let mut out = Array3::zeros((out_c, oh, ow));
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..in_c {
                    for ky in 0..kh {
                        let sy = oy + ky;
                        if sy < pad_y || sy - pad_y >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let sx = ox + kx;
                            if sx < pad_x || sx - pad_x >= w {
                                continue;
                            }
                            acc += kernels[[o, i, ky, kx]] * input[[i, sy - pad_y, sx - pad_x]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    Ok(out)
}

pub(crate) fn pool(kind: PoolKind, size: usize, input: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(NnError::Shape(format!("pool size {size} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match kind {
                    PoolKind::Max => f64::NEG_INFINITY,
                    _ => 0.0,
                };
                for dy in 0..size {
                    for dx in 0..size {
                        let v = input[[ch, oy * size + dy, ox * size + dx]];
                        match kind {
                            PoolKind::Max => acc = acc.max(v),
                            PoolKind::Avg | PoolKind::Sum => acc += v,
                        }
                    }
                }
                if kind == PoolKind::Avg {
                    acc /= (size * size) as f64;
                }
                out[[ch, oy, ox]] = acc;
            }
        }
    }
    Ok(out)
}
