//! Backpropagation training with SGD and Adam.

use super::*;
use ndarray::{Array1, Array2, Array3, Array4};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the verification split reaches this accuracy.
    pub stop_accuracy: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(NnError::InvalidConfig(format!(
                "batch size {} must be in 1..={train_len}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub verify_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LayeredModel,
    pub history: Vec<EpochStats>,
}

/// Per-layer parameter gradients, aligned with the model's layer list.
#[derive(Debug, Clone)]
pub(crate) enum LayerGrad {
    Dense { dw: Array2<f64>, db: Array1<f64> },
    Conv { dk: Array4<f64>, db: Array1<f64> },
}

pub(crate) type Grads = Vec<Option<LayerGrad>>;

pub(crate) fn zero_grads(model: &LayeredModel) -> Grads {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense { weights, bias } => Some(LayerGrad::Dense {
                dw: Array2::zeros(weights.dim()),
                db: Array1::zeros(bias.len()),
            }),
            Layer::Conv2d { kernels, bias, .. } => Some(LayerGrad::Conv {
                dk: Array4::zeros(kernels.dim()),
                db: Array1::zeros(bias.len()),
            }),
            _ => None,
        })
        .collect()
}

fn add_grads(acc: &mut Grads, other: &Grads) {
    for (a, b) in acc.iter_mut().zip(other) {
        match (a, b) {
            (Some(LayerGrad::Dense { dw, db }), Some(LayerGrad::Dense { dw: ow, db: ob })) => {
                *dw += ow;
                *db += ob;
            }
            (Some(LayerGrad::Conv { dk, db }), Some(LayerGrad::Conv { dk: ok, db: ob })) => {
                *dk += ok;
                *db += ob;
            }
            (None, None) => {}
            _ => unreachable!("gradient layout mismatch"),
        }
    }
}

fn scale_grads(grads: &mut Grads, f: f64) {
    for g in grads.iter_mut().flatten() {
        match g {
            LayerGrad::Dense { dw, db } => {
                dw.mapv_inplace(|v| v * f);
                db.mapv_inplace(|v| v * f);
            }
            LayerGrad::Conv { dk, db } => {
                dk.mapv_inplace(|v| v * f);
                db.mapv_inplace(|v| v * f);
            }
        }
    }
}

/// Forward pass keeping the input of every layer (needed by backward).
fn forward_trace(model: &LayeredModel, input: &Value) -> Result<(Vec<Value>, Array1<f64>)> {
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut value = input.clone();
    for layer in &model.layers {
        inputs.push(value.clone());
        value = apply_layer(layer, &value)?;
    }
    match value {
        Value::Vector(v) => Ok((inputs, v)),
        Value::Image(_) => Err(NnError::Shape("model output is not a vector".into())),
    }
}

/// One layer's backward step: gradient w.r.t. its input plus parameter grads.
fn backward_layer(layer: &Layer, input: &Value, grad_out: &Value) -> Result<(Value, Option<LayerGrad>)> {
    match (layer, input, grad_out) {
        (Layer::Dense { weights, .. }, Value::Vector(x), Value::Vector(g)) => {
            let mut dw = Array2::zeros(weights.dim());
            for o in 0..weights.nrows() {
                for i in 0..weights.ncols() {
                    dw[[o, i]] = g[o] * x[i];
                }
            }
            let grad_in = weights.t().dot(g);
            Ok((Value::Vector(grad_in), Some(LayerGrad::Dense { dw, db: g.clone() })))
        }
        (Layer::Conv2d { kernels, padding, .. }, Value::Image(x), Value::Image(g)) => {
            let (out_c, in_c, kh, kw) = kernels.dim();
            let (_, h, w) = x.dim();
            let (_, oh, ow) = g.dim();
            let (pad_y, pad_x) = match padding {
                Padding::Same => (pad_before(kh), pad_before(kw)),
                Padding::Valid => (0, 0),
            };
            let mut dk = Array4::zeros(kernels.dim());
            let mut db = Array1::zeros(out_c);
            let mut dx = Array3::zeros(x.dim());
            for o in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[[o, oy, ox]];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
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
                                    dk[[o, i, ky, kx]] += go * x[[i, sy - pad_y, sx - pad_x]];
                                    dx[[i, sy - pad_y, sx - pad_x]] += go * kernels[[o, i, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
            Ok((Value::Image(dx), Some(LayerGrad::Conv { dk, db })))
        }
        (Layer::Pool { kind, size }, Value::Image(x), Value::Image(g)) => {
            let (c, h, w) = x.dim();
            let mut dx = Array3::zeros((c, h, w));
            let (oh, ow) = (h / size, w / size);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[[ch, oy, ox]];
                        match kind {
                            PoolKind::Max => {
                                let (mut by, mut bx, mut bv) = (0, 0, f64::NEG_INFINITY);
                                for dy in 0..*size {
                                    for dxx in 0..*size {
                                        let v = x[[ch, oy * size + dy, ox * size + dxx]];
                                        if v > bv {
                                            bv = v;
                                            by = dy;
                                            bx = dxx;
                                        }
                                    }
                                }
                                dx[[ch, oy * size + by, ox * size + bx]] += go;
                            }
                            PoolKind::Avg => {
                                let share = go / (size * size) as f64;
                                for dy in 0..*size {
                                    for dxx in 0..*size {
                                        dx[[ch, oy * size + dy, ox * size + dxx]] += share;
                                    }
                                }
                            }
                            PoolKind::Sum => {
                                for dy in 0..*size {
                                    for dxx in 0..*size {
                                        dx[[ch, oy * size + dy, ox * size + dxx]] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((Value::Image(dx), None))
        }
        (Layer::Activation(act), x, g) => {
            let dact = |v: f64| match act {
                Activation::Sigmoid => {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s * (1.0 - s)
                }
                Activation::Relu => {
                    if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let grad_in = match (x, g) {
                (Value::Vector(xv), Value::Vector(gv)) => {
                    Value::Vector(Array1::from_iter(xv.iter().zip(gv).map(|(&v, &g)| dact(v) * g)))
                }
                (Value::Image(xm), Value::Image(gm)) => {
                    let mut out = gm.clone();
                    out.zip_mut_with(xm, |g, &v| *g *= dact(v));
                    Value::Image(out)
                }
                _ => return Err(NnError::Shape("activation gradient shape".into())),
            };
            Ok((grad_in, None))
        }
        (Layer::Flatten, Value::Image(x), Value::Vector(g)) => {
            let dx = Array3::from_shape_vec(x.dim(), g.to_vec())
                .map_err(|e| NnError::Shape(e.to_string()))?;
            Ok((Value::Image(dx), None))
        }
        (Layer::Flatten, Value::Vector(_), Value::Vector(g)) => Ok((Value::Vector(g.clone()), None)),
        (Layer::SoftmaxOutput, Value::Vector(x), Value::Vector(g)) => {
            // full softmax Jacobian; the classification path fuses this with
            // cross-entropy instead
            let p = softmax(x);
            let dot = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum::<f64>();
            let grad_in = Array1::from_iter(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
            Ok((Value::Vector(grad_in), None))
        }
        _ => Err(NnError::Shape("backward shape mismatch".into())),
    }
}

/// Loss and gradients for one labeled example (softmax cross-entropy, with
/// the softmax/cross-entropy gradient fused).
pub(crate) fn classification_grad(
    model: &LayeredModel,
    example: &Example,
) -> Result<(Grads, f64)> {
    if !model.has_softmax() {
        return Err(NnError::InvalidModel("classification training needs a softmax output".into()));
    }
    let (inputs, probs) = forward_trace(model, &example.input)?;
    let d = probs.len();
    if example.label >= d {
        return Err(NnError::Dataset(format!("label {} out of range {d}", example.label)));
    }
    let loss = -(probs[example.label].max(1e-300)).ln();
    let mut delta = probs;
    delta[example.label] -= 1.0;
    backward_from(model, &inputs, Value::Vector(delta), true)
        .map(|grads| (grads, loss))
}

fn backward_from(
    model: &LayeredModel,
    inputs: &[Value],
    output_grad: Value,
    skip_softmax: bool,
) -> Result<Grads> {
    let mut grads: Grads = vec![None; model.layers.len()];
    let mut grad = output_grad;
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        if skip_softmax && matches!(layer, Layer::SoftmaxOutput) && idx == model.layers.len() - 1 {
            continue; // fused with the loss
        }
        let (next, layer_grad) = backward_layer(layer, &inputs[idx], &grad)?;
        grads[idx] = layer_grad;
        grad = next;
    }
    Ok(grads)
}

pub(crate) struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: usize,
    slots: Vec<Option<(Vec<f64>, Vec<f64>)>>, // first/second moments, flat per layer
}

impl OptimizerState {
    pub(crate) fn new(model: &LayeredModel, kind: Optimizer, lr: f64) -> Self {
        let slots = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, bias } => {
                    let n = weights.len() + bias.len();
                    Some((vec![0.0; n], vec![0.0; n]))
                }
                Layer::Conv2d { kernels, bias, .. } => {
                    let n = kernels.len() + bias.len();
                    Some((vec![0.0; n], vec![0.0; n]))
                }
                _ => None,
            })
            .collect();
        OptimizerState { kind, lr, step: 0, slots }
    }

    pub(crate) fn apply(&mut self, model: &mut LayeredModel, grads: &Grads) {
        self.step += 1;
        for ((layer, grad), slot) in model.layers.iter_mut().zip(grads).zip(&mut self.slots) {
            let (params, gvals): (Vec<&mut f64>, Vec<f64>) = match (layer, grad) {
                (Layer::Dense { weights, bias }, Some(LayerGrad::Dense { dw, db })) => (
                    weights.iter_mut().chain(bias.iter_mut()).collect(),
                    dw.iter().chain(db.iter()).copied().collect(),
                ),
                (Layer::Conv2d { kernels, bias, .. }, Some(LayerGrad::Conv { dk, db })) => (
                    kernels.iter_mut().chain(bias.iter_mut()).collect(),
                    dk.iter().chain(db.iter()).copied().collect(),
                ),
                _ => continue,
            };
            match self.kind {
                Optimizer::Sgd => {
                    for (p, g) in params.into_iter().zip(gvals) {
                        *p -= self.lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = slot.as_mut().expect("optimizer slot layout");
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    for ((p, g), (mi, vi)) in
                        params.into_iter().zip(gvals).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mini-batch gradients computed in parallel but reduced in example order, so
/// training is bit-reproducible for a fixed seed.
fn batch_grads(model: &LayeredModel, examples: &[&Example]) -> Result<(Grads, f64)> {
    let per_example: Vec<(Grads, f64)> = examples
        .par_iter()
        .map(|ex| classification_grad(model, ex))
        .collect::<Result<_>>()?;
    let mut total = zero_grads(model);
    let mut loss = 0.0;
    for (g, l) in &per_example {
        add_grads(&mut total, g);
        loss += l;
    }
    let inv = 1.0 / examples.len() as f64;
    scale_grads(&mut total, inv);
    Ok((total, loss * inv))
}

/// Train a classifier until the verification split reaches `stop_accuracy`
/// or `max_epochs` pass, whichever comes first. The input model is not
/// modified; a trained copy is returned together with the per-epoch history.
pub fn train(model: &LayeredModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    data.validate()?;
    if data.train.is_empty() {
        return Err(NnError::Dataset("empty training split".into()));
    }
    cfg.validate(data.train.len())?;
    let mut model = model.clone();
    let mut opt = OptimizerState::new(&model, cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let verify: &[Example] = if data.verify.is_empty() { &data.train } else { &data.verify };
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (grads, loss) = batch_grads(&model, &refs)?;
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            opt.apply(&mut model, &grads);
        }
        let verify_accuracy = model.evaluate(verify)?;
        history.push(EpochStats { epoch, mean_loss: epoch_loss / batches as f64, verify_accuracy });
        if verify_accuracy >= cfg.stop_accuracy {
            break;
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Mean-squared-error fit on raw outputs (no softmax); used for oracle tests
/// and anywhere a plain least-squares fit is the reference.
pub fn train_regression(
    model: &LayeredModel,
    pairs: &[(Value, Array1<f64>)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(NnError::Dataset("no training pairs".into()));
    }
    if model.has_softmax() {
        return Err(NnError::InvalidModel("regression expects raw outputs".into()));
    }
    cfg.validate(pairs.len())?;
    let mut model = model.clone();
    let mut opt = OptimizerState::new(&model, cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut total = zero_grads(&model);
            let mut loss = 0.0;
            for &i in chunk {
                let (input, target) = &pairs[i];
                let (inputs, out) = forward_trace(&model, input)?;
                if out.len() != target.len() {
                    return Err(NnError::Shape("target length".into()));
                }
                let diff = &out - target;
                loss += diff.iter().map(|d| d * d).sum::<f64>() / out.len() as f64;
                let delta = diff.mapv(|d| 2.0 * d / out.len() as f64);
                let g = backward_from(&model, &inputs, Value::Vector(delta), false)?;
                add_grads(&mut total, &g);
            }
            let inv = 1.0 / chunk.len() as f64;
            scale_grads(&mut total, inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            opt.apply(&mut model, &total);
        }
        history.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            verify_accuracy: 0.0,
        });
    }
    Ok(TrainOutcome { model, history })
}
