//! Integer-quantized models: weights become `round(p·w)`, inputs become
//! `round(q·x)`, average pools turn into sum pools with the window area folded
//! into the propagated output scale, and sigmoids re-quantize their output.

use super::{CiphernetError, Result, SigmoidApprox};
use crate::nn::{Activation, InputShape, Layer, LayeredModel, Padding, PoolKind, Value};
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScaledLayer {
    Dense {
        weights: Array2<i64>,
        bias: Array1<i64>,
    },
    Conv2d {
        kernels: Array4<i64>,
        bias: Array1<i64>,
        padding: Padding,
    },
    /// Sum pooling; for an average pool the window area is folded into the
    /// output scale instead of dividing integers.
    SumPool {
        size: usize,
        kind: PoolKind,
    },
    Activation {
        kind: Activation,
        /// Scale of the integers entering the activation.
        in_scale: i64,
        /// Re-quantization scale of sigmoid outputs (unused by ReLU).
        out_scale: i64,
    },
    Flatten,
}

/// A network with integer weights and explicit scale bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledModel {
    pub input_shape: InputShape,
    /// Weight scaling factor p.
    pub weight_scale: i64,
    /// Input scaling factor q.
    pub input_scale: i64,
    pub layers: Vec<ScaledLayer>,
    /// Ordered factors whose product divides the final integer outputs.
    pub output_scale: Vec<i64>,
    pub sigmoid: SigmoidApprox,
    /// Softmax is applied after decryption and de-scaling.
    pub post_softmax: bool,
}

impl ScaledModel {
    pub fn total_scale(&self) -> f64 {
        self.output_scale.iter().map(|&f| f as f64).product()
    }
}

/// Quantize a trained model with weight factor `p` and input factor `q`.
/// Rejects max pooling, which has no cipherspace execution.
pub fn quantize(model: &LayeredModel, p: i64, q: i64) -> Result<ScaledModel> {
    if p < 1 || q < 1 {
        return Err(CiphernetError::Param(format!("scaling factors must be >= 1, got p={p} q={q}")));
    }
    if model.has_max_pool() {
        return Err(CiphernetError::MaxPoolUnsupported);
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut ledger: Vec<i64> = vec![q];
    let mut running: i64 = q;
    let mut post_softmax = false;
    let mul = |a: i64, b: i64| a.checked_mul(b).ok_or(CiphernetError::Overflow("scale ledger"));
    for layer in &model.layers {
        match layer {
            Layer::Dense { weights, bias } => {
                let wq = weights.mapv(|v| (v * p as f64).round() as i64);
                let bias_scale = mul(running, p)? as f64;
                let bq = bias.mapv(|v| (v * bias_scale).round() as i64);
                layers.push(ScaledLayer::Dense { weights: wq, bias: bq });
                running = mul(running, p)?;
                ledger.push(p);
            }
            Layer::Conv2d { kernels, bias, padding } => {
                let kq = kernels.mapv(|v| (v * p as f64).round() as i64);
                let bias_scale = mul(running, p)? as f64;
                let bq = bias.mapv(|v| (v * bias_scale).round() as i64);
                layers.push(ScaledLayer::Conv2d { kernels: kq, bias: bq, padding: *padding });
                running = mul(running, p)?;
                ledger.push(p);
            }
            Layer::Pool { kind, size } => match kind {
                PoolKind::Max => return Err(CiphernetError::MaxPoolUnsupported),
                PoolKind::Sum => layers.push(ScaledLayer::SumPool { size: *size, kind: PoolKind::Sum }),
                PoolKind::Avg => {
                    let area = (size * size) as i64;
                    layers.push(ScaledLayer::SumPool { size: *size, kind: PoolKind::Avg });
                    running = mul(running, area)?;
                    ledger.push(area);
                }
            },
            Layer::Activation(kind) => {
                layers.push(ScaledLayer::Activation { kind: *kind, in_scale: running, out_scale: q });
                if *kind == Activation::Sigmoid {
                    // outputs re-quantized to q; earlier factors no longer divide them
                    running = q;
                    ledger = vec![q];
                }
            }
            Layer::Flatten => layers.push(ScaledLayer::Flatten),
            Layer::SoftmaxOutput => post_softmax = true,
        }
    }
    Ok(ScaledModel {
        input_shape: model.input_shape,
        weight_scale: p,
        input_scale: q,
        layers,
        output_scale: ledger,
        sigmoid: SigmoidApprox::default(),
        post_softmax,
    })
}

/// Recover a real-valued model; weights come back within 1/(2p) per element.
pub fn dequantize(sm: &ScaledModel) -> Result<LayeredModel> {
    let p = sm.weight_scale as f64;
    let mut running = sm.input_scale;
    let mut layers = Vec::with_capacity(sm.layers.len());
    let mul = |a: i64, b: i64| a.checked_mul(b).ok_or(CiphernetError::Overflow("scale ledger"));
    for layer in &sm.layers {
        match layer {
            ScaledLayer::Dense { weights, bias } => {
                let bias_scale = mul(running, sm.weight_scale)? as f64;
                layers.push(Layer::Dense {
                    weights: weights.mapv(|v| v as f64 / p),
                    bias: bias.mapv(|v| v as f64 / bias_scale),
                });
                running = mul(running, sm.weight_scale)?;
            }
            ScaledLayer::Conv2d { kernels, bias, padding } => {
                let bias_scale = mul(running, sm.weight_scale)? as f64;
                layers.push(Layer::Conv2d {
                    kernels: kernels.mapv(|v| v as f64 / p),
                    bias: bias.mapv(|v| v as f64 / bias_scale),
                    padding: *padding,
                });
                running = mul(running, sm.weight_scale)?;
            }
            ScaledLayer::SumPool { size, kind } => {
                layers.push(Layer::Pool { kind: *kind, size: *size });
                if *kind == PoolKind::Avg {
                    running = mul(running, (size * size) as i64)?;
                }
            }
            ScaledLayer::Activation { kind, .. } => {
                layers.push(Layer::Activation(*kind));
                if *kind == Activation::Sigmoid {
                    running = sm.input_scale;
                }
            }
            ScaledLayer::Flatten => layers.push(Layer::Flatten),
        }
    }
    if sm.post_softmax {
        layers.push(Layer::SoftmaxOutput);
    }
    let model = LayeredModel { input_shape: sm.input_shape, layers };
    model.validate()?;
    Ok(model)
}

/// Integer activation value.
#[derive(Debug, Clone, PartialEq)]
pub enum IntValue {
    Vector(Array1<i64>),
    Image(Array3<i64>),
}

impl IntValue {
    pub fn from_real(value: &Value, q: i64) -> IntValue {
        let quant = |v: f64| (v * q as f64).round() as i64;
        match value {
            Value::Vector(v) => IntValue::Vector(v.mapv(quant)),
            Value::Image(m) => IntValue::Image(m.mapv(quant)),
        }
    }

    pub fn flatten(&self) -> Array1<i64> {
        match self {
            IntValue::Vector(v) => v.clone(),
            IntValue::Image(m) => Array1::from_iter(m.iter().copied()),
        }
    }
}

fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

pub(super) fn int_conv2d(
    kernels: &Array4<i64>,
    bias: &Array1<i64>,
    bias_multiplier: i64,
    padding: Padding,
    input: &Array3<i64>,
) -> Result<Array3<i64>> {
    let (out_c, in_c, kh, kw) = kernels.dim();
    let (c, h, w) = input.dim();
    if c != in_c {
        return Err(CiphernetError::Shape(format!("conv expects {in_c} channels, got {c}")));
    }
    let (oh, ow, pad_y, pad_x) = match padding {
        Padding::Same => (h, w, pad_before(kh), pad_before(kw)),
        Padding::Valid => (h + 1 - kh, w + 1 - kw, 0, 0),
    };
    let mut out = Array3::zeros((out_c, oh, ow));
    for o in 0..out_c {
        let b = (bias[o] as i128) * (bias_multiplier as i128);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc: i128 = b;
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
                            acc += (kernels[[o, i, ky, kx]] as i128)
                                * (input[[i, sy - pad_y, sx - pad_x]] as i128);
                        }
                    }
                }
                out[[o, oy, ox]] =
                    i64::try_from(acc).map_err(|_| CiphernetError::Overflow("integer conv"))?;
            }
        }
    }
    Ok(out)
}

pub(super) fn int_dense(
    weights: &Array2<i64>,
    bias: &Array1<i64>,
    bias_multiplier: i64,
    input: &Array1<i64>,
) -> Result<Array1<i64>> {
    if weights.ncols() != input.len() {
        return Err(CiphernetError::Shape(format!(
            "dense expects input {} but got {}",
            weights.ncols(),
            input.len()
        )));
    }
    let mut out = Array1::zeros(weights.nrows());
    for o in 0..weights.nrows() {
        let mut acc: i128 = (bias[o] as i128) * (bias_multiplier as i128);
        for i in 0..weights.ncols() {
            acc += (weights[[o, i]] as i128) * (input[i] as i128);
        }
        out[o] = i64::try_from(acc).map_err(|_| CiphernetError::Overflow("integer dense"))?;
    }
    Ok(out)
}

pub(super) fn int_sum_pool(size: usize, input: &Array3<i64>) -> Result<Array3<i64>> {
    let (c, h, w) = input.dim();
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(CiphernetError::Shape(format!("pool size {size} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc: i128 = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += input[[ch, oy * size + dy, ox * size + dx]] as i128;
                    }
                }
                out[[ch, oy, ox]] =
                    i64::try_from(acc).map_err(|_| CiphernetError::Overflow("sum pool"))?;
            }
        }
    }
    Ok(out)
}

/// Sigmoid on integers: rescale to real units, evaluate the polynomial,
/// re-quantize. `lane_multiplier` is 1 for the plain integer path and `w` in
/// cipherspace, where lanes carry w-scaled values.
pub(super) fn int_sigmoid(
    v: i64,
    approx: &SigmoidApprox,
    in_scale: i64,
    out_scale: i64,
    lane_multiplier: i64,
) -> i64 {
    let x = v as f64 / (in_scale as f64 * lane_multiplier as f64);
    (approx.eval(x) * out_scale as f64).round() as i64 * lane_multiplier
}

impl ScaledModel {
    /// Integer forward pass; returns raw integer scores. Divide by
    /// [`ScaledModel::total_scale`] (and apply softmax when declared) for
    /// real-valued scores.
    pub fn forward_int(&self, input: &Value) -> Result<Array1<i64>> {
        if input.shape() != self.input_shape {
            return Err(CiphernetError::Shape("input shape".into()));
        }
        let mut value = IntValue::from_real(input, self.input_scale);
        for layer in &self.layers {
            value = self.apply_int_layer(layer, value)?;
        }
        match value {
            IntValue::Vector(v) => Ok(v),
            IntValue::Image(_) => Err(CiphernetError::Shape("output is not a vector".into())),
        }
    }

    fn apply_int_layer(&self, layer: &ScaledLayer, value: IntValue) -> Result<IntValue> {
        Ok(match (layer, value) {
            (ScaledLayer::Dense { weights, bias }, IntValue::Vector(v)) => {
                IntValue::Vector(int_dense(weights, bias, 1, &v)?)
            }
            (ScaledLayer::Conv2d { kernels, bias, padding }, IntValue::Image(m)) => {
                IntValue::Image(int_conv2d(kernels, bias, 1, *padding, &m)?)
            }
            (ScaledLayer::SumPool { size, .. }, IntValue::Image(m)) => {
                IntValue::Image(int_sum_pool(*size, &m)?)
            }
            (ScaledLayer::Activation { kind, in_scale, out_scale }, v) => {
                let f = |x: i64| match kind {
                    Activation::Relu => x.max(0),
                    Activation::Sigmoid => int_sigmoid(x, &self.sigmoid, *in_scale, *out_scale, 1),
                };
                match v {
                    IntValue::Vector(v) => IntValue::Vector(v.mapv(f)),
                    IntValue::Image(m) => IntValue::Image(m.mapv(f)),
                }
            }
            (ScaledLayer::Flatten, v) => IntValue::Vector(v.flatten()),
            (l, v) => {
                return Err(CiphernetError::Shape(format!(
                    "scaled layer {l:?} cannot consume value {v:?}"
                )))
            }
        })
    }

    /// Real-valued scores: integer forward, de-scale, optional softmax.
    pub fn forward_scores(&self, input: &Value) -> Result<Array1<f64>> {
        let ints = self.forward_int(input)?;
        let scale = self.total_scale();
        let raw = ints.mapv(|v| v as f64 / scale);
        Ok(if self.post_softmax { crate::nn::softmax(&raw) } else { raw })
    }

    /// Argmax accuracy over labeled examples.
    pub fn evaluate(&self, examples: &[crate::nn::Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        use rayon::prelude::*;
        let correct: usize = examples
            .par_iter()
            .map(|ex| {
                let scores = self.forward_int(&ex.input).expect("shape-checked dataset");
                (int_argmax(&scores) == ex.label) as usize
            })
            .sum();
        Ok(correct as f64 / examples.len() as f64)
    }
}

pub(super) fn int_argmax(scores: &Array1<i64>) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}
